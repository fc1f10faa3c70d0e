//! The two ablation grids.
//!
//! The position grid toggles the MFR coordinate channels (MP) and the
//! reference point in the kernel (KP) on twin-object scenes, where two
//! identical shapes can only be told apart by where they are. The resolution
//! grid varies the MFR output scale on ordinary scenes.

use std::fmt;

use serde::Serialize;

use crate::config::{MfrScale, RunConfig};
use crate::data::dataset::{generate_scenes, Sample, TRAIN, VAL};
use crate::data::eval::EvalReport;
use crate::data::synth::SceneConfig;
use crate::error::Result;
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    Position,
    Resolution,
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Position => "position",
            Grid::Resolution => "resolution",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub grid: Grid,
    pub scale: MfrScale,
    pub mfr_positions: bool,
    pub kernel_positions: bool,
}

impl Cell {
    /// Whether this cell trains on twin-object scenes.
    pub fn twins(&self) -> bool {
        self.grid == Grid::Position
    }

    /// `base` with this cell's model and data settings applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.mfr_scale = self.scale;
        cfg.model.mfr_positions = self.mfr_positions;
        cfg.model.kernel_positions = self.kernel_positions;
        cfg.data.twins = self.twins();
        cfg
    }
}

/// `(MP, KP)` in `{0,1}²` at 1/4 scale.
pub fn position_cells() -> Vec<Cell> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(mp, kp)| Cell {
            grid: Grid::Position,
            scale: MfrScale::Quarter,
            mfr_positions: mp,
            kernel_positions: kp,
        })
        .collect()
}

/// The three MFR scales with both kinds of positional information on.
pub fn resolution_cells() -> Vec<Cell> {
    MfrScale::ALL
        .into_iter()
        .map(|scale| Cell { grid: Grid::Resolution, scale, mfr_positions: true, kernel_positions: true })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub seed: u64,
    pub report: EvalReport,
    pub seconds: f64,
}

/// One CSV row.
#[derive(Serialize)]
struct Row {
    grid: Grid,
    mfr_scale: String,
    mp: u8,
    kp: u8,
    seed: u64,
    ap: f64,
    ap50: f64,
    ap75: f64,
    ap_s: f64,
    ap_m: f64,
    ap_l: f64,
    seconds: f64,
}

/// Renders results as CSV with a header row.
pub fn to_csv(results: &[CellResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        let e = &r.report;
        w.serialize(Row {
            grid: r.cell.grid,
            mfr_scale: r.cell.scale.to_string(),
            mp: r.cell.mfr_positions as u8,
            kp: r.cell.kernel_positions as u8,
            seed: r.seed,
            ap: e.ap,
            ap50: e.ap50,
            ap75: e.ap75,
            ap_s: e.ap_s,
            ap_m: e.ap_m,
            ap_l: e.ap_l,
            seconds: r.seconds,
        })
        .map_err(|e| crate::Error::InvalidArgument(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn samples(split: &str, count: usize, seed: u64, cfg: &SceneConfig) -> Vec<Sample> {
    generate_scenes(split, count, seed, cfg).iter().enumerate().map(|(i, s)| Sample::from_scene(i, s)).collect()
}

/// Trains and evaluates every cell for every seed. Within a seed all cells
/// of a grid see the same scenes and the same initialization seed. `progress`
/// sees each result as it completes.
pub fn run(
    base: &RunConfig,
    cells: &[Cell],
    seeds: &[u64],
    mut progress: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    let mut out = Vec::with_capacity(cells.len() * seeds.len());
    for &seed in seeds {
        for cell in cells {
            let mut cfg = cell.apply(base);
            cfg.train.seed = seed;
            cfg.validate()?;
            let scenes = SceneConfig { size: cfg.model.image_size, twins: cfg.data.twins };
            let train_set = samples(TRAIN, cfg.data.train_count, seed, &scenes);
            let val_set = samples(VAL, cfg.data.val_count, seed, &scenes);
            let start = std::time::Instant::now();
            let outcome = train(&cfg, &train_set, &val_set, |_, _, _| Ok(()))?;
            let result =
                CellResult { cell: *cell, seed, report: outcome.report, seconds: start.elapsed().as_secs_f64() };
            log::info!(
                "{} {} mp={} kp={} seed={seed}: {}",
                cell.grid,
                cell.scale,
                cell.mfr_positions,
                cell.kernel_positions,
                result.report
            );
            progress(&result);
            out.push(result);
        }
    }
    Ok(out)
}

fn find<'a>(results: &'a [CellResult], seed: u64, pred: impl Fn(&Cell) -> bool) -> Option<&'a CellResult> {
    results.iter().find(|r| r.seed == seed && pred(&r.cell))
}

fn seeds_of(results: &[CellResult], grid: Grid) -> Vec<u64> {
    let mut seeds: Vec<u64> = results.iter().filter(|r| r.cell.grid == grid).map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
}

fn majority(flags: &[bool]) -> bool {
    2 * flags.iter().filter(|&&f| f).count() > flags.len()
}

/// Per-seed orderings of the position grid and their majority votes.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionVerdict {
    /// `(seed, full cell has the strictly highest AP50, MP-only beats the baseline)`.
    pub per_seed: Vec<(u64, bool, bool)>,
    pub full_best: bool,
    pub mp_beats_base: bool,
}

pub fn position_verdict(results: &[CellResult]) -> PositionVerdict {
    let per_seed: Vec<(u64, bool, bool)> = seeds_of(results, Grid::Position)
        .into_iter()
        .filter_map(|seed| {
            let cell = |mp: bool, kp: bool| {
                find(results, seed, |c| c.grid == Grid::Position && c.mfr_positions == mp && c.kernel_positions == kp)
                    .map(|r| r.report.ap50)
            };
            let (none, mp, kp, both) = (cell(false, false)?, cell(true, false)?, cell(false, true)?, cell(true, true)?);
            Some((seed, both > none && both > mp && both > kp, mp > none))
        })
        .collect();
    PositionVerdict {
        full_best: !per_seed.is_empty() && majority(&per_seed.iter().map(|s| s.1).collect::<Vec<_>>()),
        mp_beats_base: !per_seed.is_empty() && majority(&per_seed.iter().map(|s| s.2).collect::<Vec<_>>()),
        per_seed,
    }
}

/// Ratio of large-object to small-object AP. Without any small-object AP the
/// ratio is infinite when large objects score, and 1 when neither does.
pub fn large_to_small(report: &EvalReport) -> f64 {
    if report.ap_s > 0.0 {
        report.ap_l / report.ap_s
    } else if report.ap_l > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Per-seed orderings of the resolution grid and their majority votes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolutionVerdict {
    /// `(seed, AP at 1/4 >= AP at 1/8, 1/8 has the highest AP_L/AP_S)`.
    pub per_seed: Vec<(u64, bool, bool)>,
    pub quarter_beats_eighth: bool,
    pub eighth_most_skewed: bool,
}

pub fn resolution_verdict(results: &[CellResult]) -> ResolutionVerdict {
    let per_seed: Vec<(u64, bool, bool)> = seeds_of(results, Grid::Resolution)
        .into_iter()
        .filter_map(|seed| {
            let at =
                |s: MfrScale| find(results, seed, |c| c.grid == Grid::Resolution && c.scale == s).map(|r| &r.report);
            let (half, quarter, eighth) = (at(MfrScale::Half)?, at(MfrScale::Quarter)?, at(MfrScale::Eighth)?);
            let ratio = large_to_small(eighth);
            Some((seed, quarter.ap >= eighth.ap, ratio >= large_to_small(quarter) && ratio >= large_to_small(half)))
        })
        .collect();
    ResolutionVerdict {
        quarter_beats_eighth: !per_seed.is_empty() && majority(&per_seed.iter().map(|s| s.1).collect::<Vec<_>>()),
        eighth_most_skewed: !per_seed.is_empty() && majority(&per_seed.iter().map(|s| s.2).collect::<Vec<_>>()),
        per_seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(ap: f64, ap50: f64, ap_s: f64, ap_l: f64) -> EvalReport {
        EvalReport { ap, ap50, ap75: 0.0, ap_s, ap_m: 0.0, ap_l, per_class: Vec::new() }
    }

    fn result(cell: Cell, seed: u64, r: EvalReport) -> CellResult {
        CellResult { cell, seed, report: r, seconds: 0.0 }
    }

    #[test]
    fn grids_have_the_expected_cells() {
        let p = position_cells();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|c| c.twins() && c.scale == MfrScale::Quarter));
        let r = resolution_cells();
        assert_eq!(r.iter().map(|c| c.scale).collect::<Vec<_>>(), MfrScale::ALL.to_vec());
        assert!(r.iter().all(|c| !c.twins() && c.mfr_positions && c.kernel_positions));
        let cfg = p[1].apply(&RunConfig::new());
        assert!(cfg.data.twins && cfg.model.mfr_positions && !cfg.model.kernel_positions);
    }

    #[test]
    fn position_verdict_uses_majority_vote() {
        let cells = position_cells();
        let mut results = Vec::new();
        // AP50 per cell (none, mp, kp, both) for three seeds; seed 2 disagrees.
        for (seed, ap50s) in [(0, [0.1, 0.2, 0.15, 0.3]), (1, [0.1, 0.3, 0.1, 0.4]), (2, [0.3, 0.2, 0.5, 0.4])] {
            for (c, v) in cells.iter().zip(ap50s) {
                results.push(result(*c, seed, report(0.0, v, 0.0, 0.0)));
            }
        }
        let v = position_verdict(&results);
        assert_eq!(v.per_seed, vec![(0, true, true), (1, true, true), (2, false, false)]);
        assert!(v.full_best && v.mp_beats_base);
        // A tie for the top does not count as the full cell being best.
        results[3].report.ap50 = 0.2;
        results[7].report.ap50 = 0.3;
        assert!(!position_verdict(&results).full_best);
    }

    #[test]
    fn resolution_verdict_and_ratio() {
        assert_eq!(large_to_small(&report(0.0, 0.0, 0.25, 0.75)), 3.0);
        assert_eq!(large_to_small(&report(0.0, 0.0, 0.0, 0.6)), f64::INFINITY);
        assert_eq!(large_to_small(&report(0.0, 0.0, 0.0, 0.0)), 1.0);
        let cells = resolution_cells();
        let mut results = Vec::new();
        for seed in 0..3 {
            // Cells come in 1/8, 1/4, 1/2 order.
            for c in &cells {
                let (ap, s, l) = match c.scale {
                    MfrScale::Half => (0.5, 0.4, 0.6),
                    MfrScale::Quarter => (0.45, 0.3, 0.6),
                    MfrScale::Eighth => (0.3, 0.05, 0.5),
                };
                results.push(result(*c, seed, report(ap, 0.0, s, l)));
            }
        }
        let v = resolution_verdict(&results);
        assert!(v.quarter_beats_eighth && v.eighth_most_skewed);
        assert_eq!(v.per_seed.len(), 3);
        // Seed 0 has 1/8 winning on AP; the other two seeds outvote it.
        results[0].report.ap = 0.9;
        let v = resolution_verdict(&results);
        assert!(v.quarter_beats_eighth && !v.per_seed[0].1);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let c = position_cells()[3];
        let text = to_csv(&[result(c, 7, report(0.25, 0.5, 0.0, 0.75))]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "grid,mfr_scale,mp,kp,seed,ap,ap50,ap75,ap_s,ap_m,ap_l,seconds");
        assert_eq!(lines[1], "position,1/4,1,1,7,0.25,0.5,0.0,0.0,0.0,0.75,0.0");
    }
}
