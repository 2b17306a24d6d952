#![no_main]

use cbf_safelayer::learner::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ckpt) = Checkpoint::from_json(text) {
        // Validation promises that accepted checkpoints rebuild their networks.
        ckpt.policy_net().expect("validated policy rebuilds");
        ckpt.critic_net().expect("validated critics rebuild");
    }
});
