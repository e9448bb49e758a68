//! Binary weights file.
//!
//! Layout (little-endian): magic `PCARNN1\0`; u32 variant tag; u32 has-params
//! flag; u32 net count; per net: u32 input_dim, u32 hidden count, u32 widths,
//! u32 output_dim, u32 spectral flag; then f64 data: 11 vehicle parameters
//! when flagged, the force input scale, and for each net every layer's
//! weights (row-major) followed by its bias.

use std::io::{Read, Write};
use std::path::Path;

use super::{DynamicsModel, Mlp, MlpSpec, ModelError, ModelKind, LOAD_POWER_ITERATIONS};
use crate::dynamics::VehicleParams;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"PCARNN1\0";

fn params_to_array(p: &VehicleParams) -> [f64; 11] {
    [
        p.m, p.i_z, p.l_f, p.l_r, p.c_f, p.c_r, p.mu, p.c_shape, p.e_curv, p.g_accel, p.v_eps,
    ]
}

fn params_from_array(a: &[f64]) -> VehicleParams {
    VehicleParams {
        m: a[0],
        i_z: a[1],
        l_f: a[2],
        l_r: a[3],
        c_f: a[4],
        c_r: a[5],
        mu: a[6],
        c_shape: a[7],
        e_curv: a[8],
        g_accel: a[9],
        v_eps: a[10],
    }
}

pub fn write_weights<W: Write>(model: &DynamicsModel, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    let push_u32 = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    push_u32(&mut buf, model.kind().tag() as usize);
    push_u32(&mut buf, usize::from(model.params().is_some()));
    let nets = model.nets();
    push_u32(&mut buf, nets.len());
    for net in &nets {
        let s = &net.spec;
        push_u32(&mut buf, s.input_dim);
        push_u32(&mut buf, s.hidden.len());
        for &h in &s.hidden {
            push_u32(&mut buf, h);
        }
        push_u32(&mut buf, s.output_dim);
        push_u32(&mut buf, usize::from(s.spectral_norm));
    }
    if let Some(p) = model.params() {
        for v in params_to_array(p) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&model.force_input_scale().to_le_bytes());
    for net in &nets {
        for layer in &net.layers {
            for v in layer.weight.iter().chain(&layer.bias) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(ModelError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses a weights file. Spectrally normalized nets are re-normalized with
/// [`LOAD_POWER_ITERATIONS`] power iterations.
pub fn read_weights<R: Read>(mut r: R) -> Result<DynamicsModel, ModelError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)
        .map_err(|e| ModelError::Io(e.to_string()))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(8).map_err(|_| ModelError::BadMagic)? != WEIGHTS_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let kind = ModelKind::from_tag(c.u32()? as u32)?;
    let has_params = c.u32()? != 0;
    let n_nets = c.u32()?;
    if n_nets > 2 {
        return Err(ModelError::InvalidSpec(format!("{n_nets} networks")));
    }
    let mut specs = Vec::with_capacity(n_nets);
    for _ in 0..n_nets {
        let input_dim = c.u32()?;
        let n_hidden = c.u32()?;
        if n_hidden > 64 {
            return Err(ModelError::InvalidSpec(format!("{n_hidden} hidden layers")));
        }
        let hidden = (0..n_hidden).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        let output_dim = c.u32()?;
        let spectral_norm = c.u32()? != 0;
        specs.push(MlpSpec {
            input_dim,
            hidden,
            output_dim,
            spectral_norm,
        });
    }
    let params = if has_params {
        let a = (0..11).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
        Some(params_from_array(&a))
    } else {
        None
    };
    let force_input_scale = c.f64()?;
    let mut nets = Vec::with_capacity(n_nets);
    for spec in specs {
        let mut net = Mlp::zeros(spec)?;
        for layer in &mut net.layers {
            for v in layer.weight.iter_mut() {
                *v = c.f64()?;
            }
            for v in layer.bias.iter_mut() {
                *v = c.f64()?;
            }
        }
        net.spectral_normalize(LOAD_POWER_ITERATIONS);
        nets.push(net);
    }
    if c.pos != data.len() {
        return Err(ModelError::InvalidSpec("trailing bytes".into()));
    }
    let need_params = || params.ok_or(ModelError::InvalidSpec("missing vehicle parameters".into()));
    let mut it = nets.into_iter();
    let mut next_net = || it.next().ok_or(ModelError::InvalidSpec("missing network".into()));
    let mut model = match kind {
        ModelKind::Analytical => DynamicsModel::analytical(need_params()?)?,
        ModelKind::Residual => DynamicsModel::residual(need_params()?, next_net()?)?,
        ModelKind::NeuralOde => DynamicsModel::neural_ode(next_net()?)?,
        ModelKind::PcarnnShared => DynamicsModel::pcarnn_shared(need_params()?, next_net()?)?,
        ModelKind::PcarnnSplit => {
            let f = next_net()?;
            let g = next_net()?;
            DynamicsModel::pcarnn_split(need_params()?, f, g)?
        }
    };
    if let DynamicsModel::Residual {
        force_input_scale: s,
        ..
    }
    | DynamicsModel::NeuralOde {
        force_input_scale: s,
        ..
    } = &mut model
    {
        *s = force_input_scale;
    }
    Ok(model)
}

pub fn save_weights(model: &DynamicsModel, path: &Path) -> Result<(), ModelError> {
    let f = std::fs::File::create(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    write_weights(model, std::io::BufWriter::new(f)).map_err(|e| ModelError::Io(e.to_string()))
}

pub fn load_weights(path: &Path) -> Result<DynamicsModel, ModelError> {
    let f = std::fs::File::open(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    read_weights(std::io::BufReader::new(f))
}

/// Human-readable JSON export of a model.
pub fn to_json(model: &DynamicsModel) -> String {
    serde_json::to_string_pretty(model).expect("model serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BodyState, ControlInput};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [
            ModelKind::Analytical,
            ModelKind::Residual,
            ModelKind::NeuralOde,
            ModelKind::PcarnnShared,
            ModelKind::PcarnnSplit,
        ] {
            let m = DynamicsModel::initialized(kind, VehicleParams::default(), &[7, 5], &mut rng).unwrap();
            let mut buf = Vec::new();
            write_weights(&m, &mut buf).unwrap();
            assert_eq!(&buf[..8], WEIGHTS_MAGIC);
            let back = read_weights(&buf[..]).unwrap();
            assert_eq!(back.kind(), kind);
            let s = BodyState::new(9.0, 0.2, 0.1, -0.05);
            let u = ControlInput::new(0.1, 1500.0);
            let (a, b) = (m.derivative(&s, &u), back.derivative(&s, &u));
            for i in 0..4 {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
            assert!(to_json(&m).contains(match kind {
                ModelKind::Analytical => "Analytical",
                ModelKind::Residual => "Residual",
                ModelKind::NeuralOde => "NeuralOde",
                ModelKind::PcarnnShared => "PcarnnShared",
                ModelKind::PcarnnSplit => "PcarnnSplit",
            }));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(read_weights(&b"NOPE"[..]).unwrap_err(), ModelError::BadMagic);
        let mut buf = Vec::new();
        let m = DynamicsModel::analytical(VehicleParams::default()).unwrap();
        write_weights(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert_eq!(read_weights(&buf[..]).unwrap_err(), ModelError::Truncated);
        let mut bad_tag = Vec::new();
        write_weights(&m, &mut bad_tag).unwrap();
        bad_tag[8] = 9;
        assert_eq!(read_weights(&bad_tag[..]).unwrap_err(), ModelError::UnknownVariant(9));
    }
}
