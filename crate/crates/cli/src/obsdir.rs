//! Observation directories written by `degrade` and read by `restore`.
//!
//! ```text
//! obs/
//!   operator.json                      operator spec, seed included
//!   measured.ct2                       real measurements, or
//!   measured.re.ct2, measured.im.ct2   complex ones (frequency masks)
//!   truth.ct2                          ground truth, when known
//! ```
//!
//! The operator is rebuilt from its spec, so masks regenerate bitwise.

use std::fs;
use std::path::Path;

use dlsteer_core::io::{encode_ct2, read_ct2, write_atomic};
use dlsteer_core::ops::{Measurement, Observation, OperatorSpec};
use dlsteer_core::{ComplexTensor2D, Error, Result, Tensor2D};

pub fn write_observation(dir: &Path, obs: &Observation, spec: &OperatorSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(spec).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(dir.join("operator.json"), format!("{json}\n").as_bytes())?;
    match &obs.measured {
        Measurement::Real(t) => write_atomic(dir.join("measured.ct2"), &encode_ct2(t))?,
        Measurement::Complex(c) => {
            let (h, w) = (c.height(), c.width());
            let re = Tensor2D::new(h, w, c.data().iter().map(|z| z.re).collect())?;
            let im = Tensor2D::new(h, w, c.data().iter().map(|z| z.im).collect())?;
            write_atomic(dir.join("measured.re.ct2"), &encode_ct2(&re))?;
            write_atomic(dir.join("measured.im.ct2"), &encode_ct2(&im))?;
        }
    }
    if let Some(gt) = &obs.ground_truth {
        write_atomic(dir.join("truth.ct2"), &encode_ct2(gt))?;
    }
    Ok(())
}

pub fn read_observation(dir: &Path) -> Result<Observation> {
    let text = fs::read_to_string(dir.join("operator.json"))?;
    let spec: OperatorSpec =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("operator.json: {e}")))?;
    let measured = if dir.join("measured.ct2").exists() {
        Measurement::Real(read_ct2(dir.join("measured.ct2"))?)
    } else {
        let re = read_ct2(dir.join("measured.re.ct2"))?;
        let im = read_ct2(dir.join("measured.im.ct2"))?;
        re.ensure_same_shape(&im)?;
        let data = re
            .data()
            .iter()
            .zip(im.data())
            .map(|(&a, &b)| dlsteer_core::Complex64::new(a, b))
            .collect();
        Measurement::Complex(ComplexTensor2D::new(re.height(), re.width(), data)?)
    };
    let (h, w) = measured.shape();
    let truth_path = dir.join("truth.ct2");
    let truth = if truth_path.exists() { Some(read_ct2(truth_path)?) } else { None };
    Observation::new(measured, spec.build(h, w)?, truth)
}
