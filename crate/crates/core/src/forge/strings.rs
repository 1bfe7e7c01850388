use std::collections::BTreeSet;

use rand::Rng as _;

use super::WordOrder;
use crate::error::{CoreError, Result};
use crate::rng::Rng;

pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";
pub const SURFACE_LEN: usize = 6;

/// `count` pairwise-distinct random strings of `length` characters.
pub fn gen_surface_strings(rng: &mut Rng, count: usize, length: usize, alphabet: &str) -> Result<Vec<String>> {
    gen_surface_strings_excluding(rng, count, length, alphabet, &BTreeSet::new())
}

/// As [`gen_surface_strings`], also avoiding every string in `taken`.
pub fn gen_surface_strings_excluding(
    rng: &mut Rng,
    count: usize,
    length: usize,
    alphabet: &str,
    taken: &BTreeSet<String>,
) -> Result<Vec<String>> {
    let chars: Vec<char> = alphabet.chars().collect();
    if chars.is_empty() || length == 0 {
        return Err(CoreError::Generation("surface alphabet and length must be non-empty".into()));
    }
    let space = (chars.len() as f64).powi(length as i32);
    if space < 10.0 * count as f64 {
        return Err(CoreError::Generation(format!(
            "alphabet of {} symbols at length {length} cannot comfortably hold {count} distinct strings",
            chars.len()
        )));
    }
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    let budget = 100 * count + 1000;
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(CoreError::Generation(format!(
                "could not draw {count} unique strings within {budget} attempts"
            )));
        }
        let s: String = (0..length).map(|_| chars[rng.random_range(0..chars.len())]).collect();
        if taken.contains(&s) || !seen.insert(s.clone()) {
            continue;
        }
        out.push(s);
    }
    Ok(out)
}

/// Join tag, alias and entity with single spaces in the given order.
pub fn render_definition(tag: &str, alias: &str, entity: &str, order: WordOrder) -> String {
    let (a, b, c) = match order {
        WordOrder::TAE => (tag, alias, entity),
        WordOrder::ATE => (alias, tag, entity),
        WordOrder::AET => (alias, entity, tag),
        WordOrder::EAT => (entity, alias, tag),
        WordOrder::TEA => (tag, entity, alias),
        WordOrder::ETA => (entity, tag, alias),
    };
    format!("{a} {b} {c}")
}

/// The field that ends a rendered definition.
pub(crate) fn final_field<'a>(tag: &'a str, alias: &'a str, entity: &'a str, order: WordOrder) -> &'a str {
    match order {
        WordOrder::TAE | WordOrder::ATE => entity,
        WordOrder::AET | WordOrder::EAT => tag,
        WordOrder::TEA | WordOrder::ETA => alias,
    }
}

/// Fill `{tag}`, `{alias}` and `{entity}` in a custom definition template.
pub(crate) fn render_template(template: &str, tag: &str, alias: &str, entity: &str) -> String {
    template.replace("{tag}", tag).replace("{alias}", alias).replace("{entity}", entity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn renders_all_orders() {
        assert_eq!(render_definition("qwerty", "xyz", "Cleopatra", WordOrder::TAE), "qwerty xyz Cleopatra");
        assert_eq!(render_definition("qwerty", "xyz", "Cleopatra", WordOrder::ATE), "xyz qwerty Cleopatra");
        assert_eq!(render_definition("qwerty", "xyz", "Cleopatra", WordOrder::ETA), "Cleopatra qwerty xyz");
        assert_eq!(render_definition("t", "a", "e", WordOrder::AET), "a e t");
        assert_eq!(render_definition("t", "a", "e", WordOrder::EAT), "e a t");
        assert_eq!(render_definition("t", "a", "e", WordOrder::TEA), "t e a");
        for o in WordOrder::ALL {
            let r = render_definition("t", "a", "e", o);
            assert!(r.ends_with(final_field("t", "a", "e", o)));
        }
    }

    #[test]
    fn surfaces_have_requested_length_and_are_distinct() {
        let v = gen_surface_strings(&mut stream(3, 0), 1000, 6, DEFAULT_ALPHABET).unwrap();
        assert_eq!(v.len(), 1000);
        assert!(v.iter().all(|s| s.chars().count() == 6));
        let set: BTreeSet<_> = v.iter().collect();
        assert_eq!(set.len(), 1000);
        let again = gen_surface_strings(&mut stream(3, 0), 1000, 6, DEFAULT_ALPHABET).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn too_small_alphabet_is_rejected() {
        let err = gen_surface_strings(&mut stream(1, 0), 10, 2, "ab").unwrap_err();
        assert!(matches!(err, CoreError::Generation(_)));
    }

    #[test]
    fn excluded_strings_never_drawn() {
        let taken: BTreeSet<String> = ["aa", "ab", "ba"].iter().map(|s| s.to_string()).collect();
        let v = gen_surface_strings_excluding(&mut stream(5, 0), 5, 3, "ab", &BTreeSet::new());
        assert!(v.is_err());
        let v = gen_surface_strings_excluding(&mut stream(5, 0), 2, 2, "abcdefgh", &taken).unwrap();
        assert!(v.iter().all(|s| !taken.contains(s)));
    }
}
