#![no_main]

use cbf_safelayer::trace::{parse_csv, write_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_csv(data) {
        if rows.is_empty() {
            return;
        }
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).expect("parsed rows serialize");
        assert_eq!(parse_csv(buf.as_slice()).expect("round trip parses"), rows);
    }
});
