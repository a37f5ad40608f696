//! Versioned binary model file.
//!
//! ```text
//! magic "FMIWAE01" | u32 version
//! config: u64 p, d, h, k_train, l_test | u8 activation | u8 likelihood | f64 df | f64 floor
//! layout: u32 segments, each { u16 name_len, name, u64 rows, u64 cols }
//! values: u64 count, f64 each
//! scaler: u8 present, then f64 mu[p], f64 sigma[p], u64 n[p]
//! ```
//! Every integer and float is little-endian.

use super::config::{Likelihood, MiwaeConfig};
use super::model::{miwae_layout, MiwaeModel};
use crate::error::{Error, Result};
use crate::fedstd::GlobalScaler;
use crate::numcore::{Activation, ParamVector};
use crate::scalar::Real;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FMIWAE01";
const VERSION: u32 = 1;

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated model file: {e}")))?;
    Ok(b)
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(get::<8, _>(r)?))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(get::<8, _>(r)?))
}

pub fn write_model<T: Real, W: Write>(w: &mut W, model: &MiwaeModel<T>, scaler: Option<&GlobalScaler<T>>) -> Result<()> {
    let c = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [c.n_features, c.latent_dim, c.hidden_units, c.k_train, c.l_test] {
        put_u64(w, v as u64)?;
    }
    w.write_all(&[match c.activation {
        Activation::Tanh => 0u8,
    }])?;
    let (tag, df) = match c.likelihood {
        Likelihood::Gaussian => (0u8, 0.0),
        Likelihood::StudentT { df } => (1u8, df),
    };
    w.write_all(&[tag])?;
    put_f64(w, df)?;
    put_f64(w, c.scale_floor)?;

    let layout = model.params().layout();
    w.write_all(&(layout.segments().len() as u32).to_le_bytes())?;
    for s in layout.segments() {
        w.write_all(&(s.name.len() as u16).to_le_bytes())?;
        w.write_all(s.name.as_bytes())?;
        put_u64(w, s.rows as u64)?;
        put_u64(w, s.cols as u64)?;
    }
    put_u64(w, model.params().len() as u64)?;
    for &v in model.params().as_slice() {
        put_f64(w, v.as_f64())?;
    }
    match scaler {
        None => w.write_all(&[0u8])?,
        Some(s) => {
            w.write_all(&[1u8])?;
            for &m in &s.mu {
                put_f64(w, m.as_f64())?;
            }
            for &sd in &s.sigma {
                put_f64(w, sd.as_f64())?;
            }
            for &n in &s.n {
                put_u64(w, n)?;
            }
        }
    }
    Ok(())
}

pub fn read_model<T: Real, R: Read>(r: &mut R) -> Result<(MiwaeModel<T>, Option<GlobalScaler<T>>)> {
    if &get::<8, _>(r)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(get::<4, _>(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = get_u64(r)? as usize;
    }
    let activation = match get::<1, _>(r)?[0] {
        0 => Activation::Tanh,
        t => return Err(Error::Format(format!("unknown activation tag {t}"))),
    };
    let tag = get::<1, _>(r)?[0];
    let df = get_f64(r)?;
    let likelihood = match tag {
        0 => Likelihood::Gaussian,
        1 => Likelihood::StudentT { df },
        t => return Err(Error::Format(format!("unknown likelihood tag {t}"))),
    };
    let scale_floor = get_f64(r)?;
    let config = MiwaeConfig {
        n_features: dims[0],
        latent_dim: dims[1],
        hidden_units: dims[2],
        k_train: dims[3],
        l_test: dims[4],
        likelihood,
        activation,
        scale_floor,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let layout = miwae_layout(&config);

    let n_seg = u32::from_le_bytes(get::<4, _>(r)?) as usize;
    if n_seg != layout.segments().len() {
        return Err(Error::Format(format!("{n_seg} segments, configuration implies {}", layout.segments().len())));
    }
    for s in layout.segments() {
        let len = u16::from_le_bytes(get::<2, _>(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Format(e.to_string()))?;
        let (rows, cols) = (get_u64(r)? as usize, get_u64(r)? as usize);
        if name != s.name.as_bytes() || rows != s.rows || cols != s.cols {
            return Err(Error::Format(format!("layout header disagrees at segment '{}'", s.name)));
        }
    }
    let count = get_u64(r)? as usize;
    if count != layout.len() {
        return Err(Error::Format(format!("{count} values, layout needs {}", layout.len())));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(T::lit(get_f64(r)?));
    }
    let params = ParamVector::from_values(layout, values)?;
    let model = MiwaeModel::from_params(config, params)?;
    let p = dims[0];
    let scaler = match get::<1, _>(r)?[0] {
        0 => None,
        1 => {
            let mut mu = Vec::with_capacity(p);
            let mut sigma = Vec::with_capacity(p);
            let mut n = Vec::with_capacity(p);
            for _ in 0..p {
                mu.push(T::lit(get_f64(r)?));
            }
            for _ in 0..p {
                sigma.push(T::lit(get_f64(r)?));
            }
            for _ in 0..p {
                n.push(get_u64(r)?);
            }
            Some(GlobalScaler { mu, sigma, n })
        }
        t => return Err(Error::Format(format!("unknown scaler flag {t}"))),
    };
    Ok((model, scaler))
}

pub fn save_model<T: Real>(path: &Path, model: &MiwaeModel<T>, scaler: Option<&GlobalScaler<T>>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut f, model, scaler)?;
    f.flush()?;
    Ok(())
}

pub fn load_model<T: Real>(path: &Path) -> Result<(MiwaeModel<T>, Option<GlobalScaler<T>>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut f)
}
