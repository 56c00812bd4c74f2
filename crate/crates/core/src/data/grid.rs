use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, make_splits, Dataset};
use crate::error::{Error, Result};
use crate::moment_core::CovarianceMode;
use crate::network::{build_model, Architecture, HeadKind, DEFAULT_HIDDEN_WIDTH};
use crate::objective::evaluate;
use crate::training::{train, TrainConfig};

/// Candidate dropout rates.
pub const DROPOUT_GRID: [f64; 4] = [0.005, 0.01, 0.05, 0.1];

/// Repeated-split evaluation protocol shared by the grid search and the final runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub repeats: usize,
    pub test_frac: f64,
    pub val_frac: f64,
    pub rates: Vec<f64>,
    pub hidden_width: usize,
    /// Seed of the split permutations; training seeds come from [`TrainConfig::seed`].
    pub split_seed: u64,
    pub jobs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            repeats: 20,
            test_frac: 0.1,
            val_frac: 0.2,
            rates: DROPOUT_GRID.to_vec(),
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            split_seed: 0,
            jobs: 1,
        }
    }
}

impl ProtocolConfig {
    pub(crate) fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchOutcome {
    pub best_rate: f64,
    /// `(rate, mean validation NLL)` in grid order; empty when there was nothing to compare.
    pub mean_val_nll: Vec<(f64, f64)>,
    pub training_runs: usize,
}

/// Picks the dropout rate with the lowest validation NLL averaged over the splits.
///
/// Each split trains on the remaining training rows with the validation rows
/// held out; ties go to the smaller rate.
pub fn grid_search_dropout(
    ds: &Dataset,
    arch: Architecture,
    mode: CovarianceMode,
    head: HeadKind,
    train_config: &TrainConfig,
    protocol: &ProtocolConfig,
) -> Result<GridSearchOutcome> {
    match protocol.rates.as_slice() {
        [] => return Err(Error::invalid("empty dropout grid")),
        [only] => {
            crate::moment_core::check_rate(*only)?;
            return Ok(GridSearchOutcome {
                best_rate: *only,
                mean_val_nll: Vec::new(),
                training_runs: 0,
            });
        }
        _ => {}
    }
    if protocol.val_frac <= 0.0 {
        return Err(Error::invalid("grid search needs a validation fraction"));
    }
    let splits = make_splits(
        ds,
        protocol.repeats,
        protocol.test_frac,
        protocol.val_frac,
        protocol.split_seed,
    )?;
    let materialized: Vec<_> = splits.iter().map(|s| s.materialize(ds)).collect();
    let tasks: Vec<(usize, usize)> = (0..protocol.rates.len())
        .flat_map(|r| (0..splits.len()).map(move |s| (r, s)))
        .collect();

    let run = |&(rate_idx, split_idx): &(usize, usize)| -> Result<f64> {
        let rate = protocol.rates[rate_idx];
        let config = build_model(arch, ds.q(), protocol.hidden_width, rate, mode, head)?;
        let data = &materialized[split_idx];
        let tc = TrainConfig {
            seed: derive_seed(train_config.seed, &[split_idx as u64]),
            ..*train_config
        };
        let outcome = train(&config, &tc, &data.train)?;
        let val = data.val.as_ref().expect("validation split requested");
        Ok(evaluate(&config, &outcome.params, val)?.nll)
    };
    let nlls: Vec<f64> = protocol
        .pool()?
        .install(|| tasks.par_iter().map(run).collect::<Result<Vec<_>>>())?;

    let mut mean_val_nll: Vec<(f64, f64)> = protocol
        .rates
        .iter()
        .enumerate()
        .map(|(r, &rate)| {
            let sum: f64 = tasks
                .iter()
                .zip(&nlls)
                .filter(|((ri, _), _)| *ri == r)
                .map(|(_, v)| v)
                .sum();
            (rate, sum / splits.len() as f64)
        })
        .collect();
    let best_rate = mean_val_nll
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map(|(r, _)| r)
        .expect("non-empty grid");
    mean_val_nll.shrink_to_fit();
    Ok(GridSearchOutcome {
        best_rate,
        mean_val_nll,
        training_runs: tasks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rate_is_returned_without_training() {
        let ds = Dataset::new("d", vec![0.0; 10], 1, vec![0.0; 10]).unwrap();
        let protocol = ProtocolConfig {
            rates: vec![0.05],
            ..ProtocolConfig::default()
        };
        let out = grid_search_dropout(
            &ds,
            Architecture::MpGelu,
            CovarianceMode::Full,
            HeadKind::Heteroscedastic2,
            &TrainConfig::uci(0),
            &protocol,
        )
        .unwrap();
        assert_eq!(out.best_rate, 0.05);
        assert_eq!(out.training_runs, 0);
    }

    #[test]
    fn full_grid_runs_every_split_and_rate() {
        let ds = super::super::toy_generate(60, 1);
        let protocol = ProtocolConfig {
            repeats: 3,
            ..ProtocolConfig::default()
        };
        let tc = TrainConfig {
            learning_rate: 0.01,
            epochs: 2,
            batch_size: 16,
            seed: 0,
        };
        let out = grid_search_dropout(
            &ds,
            Architecture::Relu,
            CovarianceMode::Diagonal,
            HeadKind::Heteroscedastic2,
            &tc,
            &protocol,
        )
        .unwrap();
        assert_eq!(out.training_runs, 12);
        assert_eq!(out.mean_val_nll.len(), 4);
        assert!(DROPOUT_GRID.contains(&out.best_rate));
    }
}
