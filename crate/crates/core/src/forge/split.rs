use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{Split, Stage, SubsetId, SubsetSpec};
use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Randomly partition `entities` into the subsets of `specs`.
///
/// Each subset gets `floor(fraction * N)` entities; the leftover goes to the
/// subset with the largest fraction (the first one on ties). Output follows
/// the order of `specs`, ids sorted within each subset.
pub fn split_entities(entities: &[u32], specs: &[SubsetSpec], rng: &mut Rng) -> Result<Vec<(SubsetId, Vec<u32>)>> {
    if entities.is_empty() {
        return Err(CoreError::Generation("cannot split an empty entity list".into()));
    }
    SubsetSpec::validate_layout(specs)?;
    let n = entities.len();
    let mut sizes: Vec<usize> = specs.iter().map(|s| (s.entity_fraction * n as f64 + 1e-9).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let largest = specs
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if s.entity_fraction > specs[best].entity_fraction { i } else { best });
    sizes[largest] += n - assigned;

    let mut order = entities.to_vec();
    order.sort_unstable();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(specs.len());
    let mut start = 0;
    for (spec, size) in specs.iter().zip(sizes) {
        let mut ids = order[start..start + size].to_vec();
        ids.sort_unstable();
        out.push((spec.id, ids));
        start += size;
    }
    Ok(out)
}

/// Label an entity's QA items with their split.
///
/// First-stage entities keep one uniformly chosen item for validation and
/// train on the rest; second-stage entities put every item in the test set.
pub fn assign_qa_splits<T>(qa_pairs: Vec<T>, stage: Stage, rng: &mut Rng) -> Vec<(T, Split)> {
    match stage {
        Stage::X1 => {
            if qa_pairs.is_empty() {
                return Vec::new();
            }
            let held_out = rng.random_range(0..qa_pairs.len());
            qa_pairs
                .into_iter()
                .enumerate()
                .map(|(i, qa)| (qa, if i == held_out { Split::Val } else { Split::Train }))
                .collect()
        }
        Stage::X2 => qa_pairs.into_iter().map(|qa| (qa, Split::Test)).collect(),
    }
}

const REPAIR_TRIES: usize = 200;

/// Pair every entity with a different entity of the same subset to be named
/// in its (inconsistent) definition.
///
/// Starts from a random single-cycle permutation (always a derangement) and
/// repairs pairs for which `conflict(true_id, stated_id)` holds by random
/// swaps. Returns `(true_id, stated_id)` in the order of `ids`; fails if a
/// conflict cannot be repaired.
pub fn make_inconsistent_assignment(
    ids: &[u32],
    conflict: impl Fn(u32, u32) -> bool,
    rng: &mut Rng,
) -> Result<Vec<(u32, u32)>> {
    let (pairs, unresolved) = derange(ids, conflict, rng)?;
    match unresolved.first() {
        None => Ok(pairs),
        Some(id) => Err(CoreError::Generation(format!(
            "no valid inconsistent partner for entity {id} after {REPAIR_TRIES} tries"
        ))),
    }
}

/// Like [`make_inconsistent_assignment`], but conflicts that survive the
/// bounded repair are kept (the result is still a derangement). Returns the
/// pairs and the number of remaining conflicts.
pub(crate) fn make_inconsistent_assignment_lenient(
    ids: &[u32],
    conflict: impl Fn(u32, u32) -> bool,
    rng: &mut Rng,
) -> Result<(Vec<(u32, u32)>, usize)> {
    let (pairs, unresolved) = derange(ids, conflict, rng)?;
    Ok((pairs, unresolved.len()))
}

const RESTARTS: usize = 20;

/// Best of up to [`RESTARTS`] repaired random cycles.
fn derange(ids: &[u32], conflict: impl Fn(u32, u32) -> bool, rng: &mut Rng) -> Result<(Vec<(u32, u32)>, Vec<u32>)> {
    let n = ids.len();
    if n < 2 {
        return Err(CoreError::Generation(format!(
            "an inconsistent subset needs at least 2 entities, got {n}"
        )));
    }
    let mut best = derange_once(ids, &conflict, rng);
    for _ in 1..RESTARTS {
        if best.1.is_empty() {
            break;
        }
        let next = derange_once(ids, &conflict, rng);
        if next.1.len() < best.1.len() {
            best = next;
        }
    }
    Ok(best)
}

fn derange_once(ids: &[u32], conflict: &impl Fn(u32, u32) -> bool, rng: &mut Rng) -> (Vec<(u32, u32)>, Vec<u32>) {
    let n = ids.len();
    // Sattolo's algorithm: a uniformly random n-cycle.
    let mut target: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        target.swap(i, j);
    }
    let self_map = |i: usize, t: usize| t == i;
    let bad = |i: usize, t: usize| t == i || conflict(ids[i], ids[t]);
    let mut unresolved = Vec::new();
    for i in 0..n {
        if !bad(i, target[i]) {
            continue;
        }
        let mut fixed = false;
        for _ in 0..REPAIR_TRIES {
            let j = rng.random_range(0..n);
            if j == i {
                continue;
            }
            // The partner must stay valid; an unrepaired earlier entry may
            // keep its conflict but never becomes a fixed point.
            let partner_ok = if j < i && unresolved.contains(&ids[j]) {
                !self_map(j, target[i])
            } else {
                !bad(j, target[i])
            };
            if !bad(i, target[j]) && partner_ok {
                target.swap(i, j);
                fixed = true;
                break;
            }
        }
        if !fixed {
            unresolved.push(ids[i]);
        }
    }
    ((0..n).map(|i| (ids[i], ids[target[i]])).collect(), unresolved)
}

/// Subset assignment for a whole bundle, including the tag-reliability
/// sweep, where the base `D1`/`D2` pools are subdivided by `alpha`.
pub(crate) fn assign_subsets(
    entity_ids: &[u32],
    base: &[SubsetSpec],
    variant: &super::Variant,
    rng: &mut Rng,
) -> Result<Vec<super::SubsetAssignment>> {
    use super::{SubsetAssignment, Variant};
    let split = split_entities(entity_ids, base, rng)?;
    let Variant::Alpha { alpha } = *variant else {
        return Ok(base
            .iter()
            .zip(split)
            .map(|(spec, (_, entity_ids))| SubsetAssignment { spec: spec.clone(), entity_ids })
            .collect());
    };
    let rows = variant.layout(base.to_vec());
    let mut out = Vec::new();
    for (spec, (_, pool)) in base.iter().zip(split) {
        let (keep_id, other_id) = match spec.id {
            SubsetId::D1consQA1 => (SubsetId::D1consQA1, SubsetId::D9inconsQA9),
            SubsetId::D2inconsQA2 => (SubsetId::D2inconsQA2, SubsetId::D10consQA10),
            _ => {
                out.push(SubsetAssignment { spec: spec.clone(), entity_ids: pool });
                continue;
            }
        };
        let exact = alpha * pool.len() as f64;
        let keep = exact.round();
        if (exact - keep).abs() > 1e-9 {
            return Err(CoreError::InvalidVariant(format!(
                "alpha {alpha} does not divide the {} pool of {} entities into whole entities",
                spec.id,
                pool.len()
            )));
        }
        let mut shuffled = pool;
        shuffled.shuffle(rng);
        let (mut a, mut b) = (shuffled[..keep as usize].to_vec(), shuffled[keep as usize..].to_vec());
        a.sort_unstable();
        b.sort_unstable();
        let row = |id| rows.iter().find(|r: &&SubsetSpec| r.id == id).expect("alpha layout row").clone();
        out.push(SubsetAssignment { spec: row(keep_id), entity_ids: a });
        out.push(SubsetAssignment { spec: row(other_id), entity_ids: b });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::collections::BTreeSet;

    fn sizes(out: &[(SubsetId, Vec<u32>)]) -> Vec<usize> {
        out.iter().map(|(_, v)| v.len()).collect()
    }

    #[test]
    fn natural_layout_sizes_for_4000() {
        let ids: Vec<u32> = (0..4000).collect();
        let out = split_entities(&ids, &SubsetSpec::cvdb_layout(), &mut stream(1, 0)).unwrap();
        assert_eq!(sizes(&out), vec![1000, 1000, 400, 400, 320, 320, 240, 320]);
    }

    #[test]
    fn set_inclusion_sizes_for_8000() {
        let ids: Vec<u32> = (0..8000).collect();
        let out = split_entities(&ids, &SubsetSpec::set_inclusion_layout(), &mut stream(1, 0)).unwrap();
        assert_eq!(sizes(&out), vec![3200, 3200, 800, 800]);
    }

    #[test]
    fn remainder_goes_to_largest_subset() {
        let ids: Vec<u32> = (0..13).collect();
        let out = split_entities(&ids, &SubsetSpec::set_inclusion_layout(), &mut stream(1, 0)).unwrap();
        // floors: 5, 5, 1, 1 -> one left over for the first 0.4 subset
        assert_eq!(sizes(&out), vec![6, 5, 1, 1]);
    }

    #[test]
    fn split_is_a_disjoint_cover() {
        let ids: Vec<u32> = (100..1337).collect();
        let out = split_entities(&ids, &SubsetSpec::cvdb_layout(), &mut stream(9, 0)).unwrap();
        let mut all = BTreeSet::new();
        for (_, v) in &out {
            for id in v {
                assert!(all.insert(*id));
            }
        }
        assert_eq!(all, ids.iter().copied().collect());
    }

    #[test]
    fn empty_split_errors() {
        assert!(split_entities(&[], &SubsetSpec::cvdb_layout(), &mut stream(1, 0)).is_err());
    }

    #[test]
    fn qa_split_counts() {
        let out = assign_qa_splits((0..6).collect::<Vec<_>>(), Stage::X1, &mut stream(2, 0));
        assert_eq!(out.iter().filter(|(_, s)| *s == Split::Train).count(), 5);
        assert_eq!(out.iter().filter(|(_, s)| *s == Split::Val).count(), 1);
        let out = assign_qa_splits((0..6).collect::<Vec<_>>(), Stage::X2, &mut stream(2, 0));
        assert!(out.iter().all(|(_, s)| *s == Split::Test));
        let out = assign_qa_splits((0..4).collect::<Vec<_>>(), Stage::X1, &mut stream(2, 0));
        assert_eq!(out.iter().filter(|(_, s)| *s == Split::Train).count(), 3);
    }

    #[test]
    fn two_entities_swap() {
        let out = make_inconsistent_assignment(&[4, 9], |_, _| false, &mut stream(1, 0)).unwrap();
        assert_eq!(out, vec![(4, 9), (9, 4)]);
    }

    #[test]
    fn singleton_is_an_error() {
        assert!(make_inconsistent_assignment(&[4], |_, _| false, &mut stream(1, 0)).is_err());
    }

    #[test]
    fn derangement_respects_conflicts() {
        let ids: Vec<u32> = (0..300).collect();
        let value = |id: u32| id % 7;
        let out = make_inconsistent_assignment(&ids, |a, b| value(a) == value(b), &mut stream(4, 0)).unwrap();
        let stated: BTreeSet<u32> = out.iter().map(|&(_, s)| s).collect();
        assert_eq!(stated.len(), ids.len(), "assignment is a permutation");
        for (t, s) in out {
            assert_ne!(t, s);
            assert_ne!(value(t), value(s));
        }
    }

    #[test]
    fn impossible_conflicts_error() {
        assert!(make_inconsistent_assignment(&[1, 2, 3], |_, _| true, &mut stream(1, 0)).is_err());
    }
}
