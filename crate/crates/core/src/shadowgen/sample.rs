use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, PromptRecord};
use crate::error::{Error, Result};

/// Evaluation prompts drawn without replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub dominant: Vec<PromptRecord>,
    pub subordinate: Vec<PromptRecord>,
    /// A request exceeded the available records and was reduced.
    pub clamped: bool,
}

pub fn sample_eval(ds: &Dataset, n_dom: usize, n_sub: usize, seed: u64) -> Result<EvalSplit> {
    if ds.records.is_empty() {
        return Err(Error::Input("cannot sample from an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doms: Vec<&PromptRecord> = ds.dominant().collect();
    let subs: Vec<&PromptRecord> = ds.subordinate().collect();
    let mut clamped = false;
    let mut draw = |pool: &[&PromptRecord], want: usize| {
        let n = want.min(pool.len());
        clamped |= n < want;
        index::sample(&mut rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect::<Vec<_>>()
    };
    let dominant = draw(&doms, n_dom);
    let subordinate = draw(&subs, n_sub);
    Ok(EvalSplit {
        dominant,
        subordinate,
        clamped,
    })
}
