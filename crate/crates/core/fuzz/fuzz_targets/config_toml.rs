#![no_main]

use libfuzzer_sys::fuzz_target;
use staged_alae::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = Config::from_toml_str(text) {
        let again = Config::from_toml_str(&config.to_toml()).expect("serialized configs parse");
        assert_eq!(again, config);
    }
});
