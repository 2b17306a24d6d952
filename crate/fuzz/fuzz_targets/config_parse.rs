#![no_main]

use cbf_safelayer::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        // Accepted configs must survive a serialize/parse round trip.
        let again = parse_config(&cfg.to_toml().expect("valid config serializes")).expect("round trip parses");
        assert_eq!(again, cfg);
    }
});
