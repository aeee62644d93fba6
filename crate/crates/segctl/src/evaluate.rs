//! Dice tables, summary statistics and the Dice/CV scatter.

use brainseg::metrics::{mean_std, pearson, DiceReport};
use brainseg::volume::{LabelMap, StructureTable};

use crate::CliError;

/// One predicted/ground-truth pair on the same grid.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub name: String,
    pub corruption: Option<String>,
    pub prediction: LabelMap,
    pub truth: LabelMap,
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeScore {
    pub name: String,
    pub corruption: Option<String>,
    pub report: DiceReport,
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub volumes: Vec<VolumeScore>,
    /// Mean and population standard deviation of the per-volume average Dice.
    pub average: (f64, f64),
    pub weighted: (f64, f64),
    /// Pearson correlation of average Dice with CV, when every volume has a
    /// CV and both series vary.
    pub pearson: Option<f64>,
}

pub fn evaluate_items(items: &[EvalItem]) -> Result<Evaluation, CliError> {
    if items.is_empty() {
        return Err(CliError::Input("nothing to evaluate: empty test split".into()));
    }
    let mut volumes = Vec::with_capacity(items.len());
    for it in items {
        if it.prediction.grid.dims != it.truth.grid.dims {
            return Err(CliError::Input(format!("{}: prediction and truth grids differ", it.name)));
        }
        let report = DiceReport::from_labels(&it.prediction.labels, &it.truth.labels)?;
        volumes.push(VolumeScore { name: it.name.clone(), corruption: it.corruption.clone(), report, cv: it.cv });
    }
    let da: Vec<f64> = volumes.iter().map(|v| v.report.average).collect();
    let dv: Vec<f64> = volumes.iter().map(|v| v.report.weighted).collect();
    let cvs: Option<Vec<f64>> = volumes.iter().map(|v| v.cv).collect();
    let pearson = cvs.and_then(|cv| pearson(&da, &cv).ok());
    Ok(Evaluation { average: mean_std(&da), weighted: mean_std(&dv), pearson, volumes })
}

impl Evaluation {
    pub fn average_dice(&self) -> Vec<f64> {
        self.volumes.iter().map(|v| v.report.average).collect()
    }

    /// One row per (volume, structure present in either map).
    pub fn dice_table(&self, structures: &StructureTable) -> String {
        let mut s = String::from("volume\tstructure\tname\tdice\ttruth_voxels\n");
        for v in &self.volumes {
            for (k, d) in &v.report.per_structure {
                let n = v.report.structure_volumes.get(k).copied().unwrap_or(0);
                s.push_str(&format!("{}\t{k}\t{}\t{d:.6}\t{n}\n", v.name, structures.name(*k)));
            }
        }
        s
    }

    pub fn row_count(&self) -> usize {
        self.volumes.iter().map(|v| v.report.per_structure.len()).sum()
    }

    pub fn summary(&self) -> String {
        let pct = |(m, s): (f64, f64)| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s);
        format!(
            "metric\tvalue_percent\nvolumes\t{}\nD_A\t{}\nD_V\t{}\n",
            self.volumes.len(),
            pct(self.average),
            pct(self.weighted)
        )
    }

    pub fn scatter(&self) -> String {
        let mut s = String::from("volume\tcorruption\tD_A\tCV\n");
        for v in &self.volumes {
            let cv = v.cv.map_or("NA".to_string(), |c| format!("{c:.6}"));
            s.push_str(&format!("{}\t{}\t{:.6}\t{cv}\n", v.name, v.corruption.as_deref().unwrap_or("clean"), v.report.average));
        }
        let r = self.pearson.map_or("NA".to_string(), |r| format!("{r:.6}"));
        s.push_str(&format!("# pearson_r\t{r}\n"));
        s
    }
}
