//! Process environment and OS entropy.

use s2alloc_core::{load_config, AllocatorConfig, ConfigError, MacKey};

/// Eight bytes from the OS generator.
pub fn os_entropy() -> u64 {
    let mut buf = [0u8; 8];
    getrandom::getrandom(&mut buf).expect("OS entropy source unavailable");
    u64::from_le_bytes(buf)
}

/// A fresh secret MAC key from the OS generator.
pub fn random_key() -> MacKey {
    let mut key = [0u8; 16];
    getrandom::getrandom(&mut key).expect("OS entropy source unavailable");
    MacKey::from_bytes(key)
}

/// Builds a config from key/value pairs. With `S2_SEED` set the MAC key is
/// derived from the seed so whole runs replay bit for bit; otherwise it comes
/// from the OS.
pub fn config_from_vars<I, K, V>(vars: I) -> Result<AllocatorConfig, ConfigError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut cfg = load_config(vars, MacKey::from_bytes([0; 16]))?;
    cfg.mac_key = match cfg.seed {
        Some(seed) => MacKey::from_seed(seed),
        None => random_key(),
    };
    Ok(cfg)
}

/// [`config_from_vars`] over the process environment.
pub fn config_from_env() -> Result<AllocatorConfig, ConfigError> {
    config_from_vars(std::env::vars())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_key_is_reproducible() {
        let a = config_from_vars([("S2_SEED", "12")]).unwrap();
        let b = config_from_vars([("S2_SEED", "12")]).unwrap();
        assert_eq!(a.mac_key, b.mac_key);
        assert_eq!(a.mac_key, MacKey::from_seed(12));
    }

    #[test]
    fn unseeded_keys_differ() {
        let a = config_from_vars(std::iter::empty::<(&str, &str)>()).unwrap();
        let b = config_from_vars(std::iter::empty::<(&str, &str)>()).unwrap();
        assert_ne!(a.mac_key, b.mac_key);
    }

    #[test]
    fn bad_value_names_key() {
        let err = config_from_vars([("S2_FBC_LEN", "x")]).unwrap_err();
        assert!(err.to_string().starts_with("S2_FBC_LEN"));
    }
}
