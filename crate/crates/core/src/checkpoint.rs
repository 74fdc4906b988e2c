// Binary checkpoint of a trained field model.
//
// Layout, all little-endian:
//   b"FLUX", version: u32
//   u32 x 9: levels, features_per_level, log2_table_size, base_resolution,
//            append_raw_coords, hidden_layers, hidden_width, input_dim,
//            material region count
//   f64 x 5: growth_factor, x_min, x_max, y_min, y_max
//   f64 x 5 per material region: x0, y0, x1, y1, value
//   f32: hash tables, level-major then row-major
//   f32: per layer, weights (input-major) then biases

use std::io::{Read, Write};

use crate::error::{FluxError, Result};
use crate::geom::Rect;
use crate::hashgrid::{HashGrid, HashGridConfig};
use crate::net::{FieldModel, MaterialChannel, Mlp, MlpConfig};
use crate::scene::DomainBounds;

const MAGIC: &[u8; 4] = b"FLUX";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &FieldModel, mut out: W) -> Result<()> {
    let h = &model.hash().cfg;
    let m = &model.mlp().cfg;
    let regions = model.material().map_or(&[][..], |c| &c.regions[..]);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let ints = [
        h.levels,
        h.features_per_level,
        h.log2_table_size as usize,
        h.base_resolution,
        usize::from(h.append_raw_coords),
        m.hidden_layers,
        m.hidden_width,
        m.input_dim,
        regions.len(),
    ];
    for v in ints {
        let v = u32::try_from(v).map_err(|_| FluxError::Contract(format!("{v} does not fit the checkpoint header")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    let b = model.bounds();
    let mut reals = vec![h.growth_factor, b.x_min, b.x_max, b.y_min, b.y_max];
    for (r, v) in regions {
        reals.extend_from_slice(&[r.x0, r.y0, r.x1, r.y1, *v]);
    }
    for v in reals {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut body = Vec::with_capacity(4 * model.param_count());
    let params = model.hash().tables.iter().chain(model.mlp().layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias)));
    for &v in params {
        body.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&body)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| FluxError::Format(format!("checkpoint truncated in {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(what)?) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; 4 * n];
        self.inner.read_exact(&mut buf).map_err(|_| FluxError::Format(format!("checkpoint truncated in {what}")))?;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
    }
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<FieldModel> {
    let mut r = Reader { inner: input };
    if &r.bytes::<4>("magic")? != MAGIC {
        return Err(FluxError::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version as u32 != VERSION {
        return Err(FluxError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut ints = [0usize; 9];
    for v in &mut ints {
        *v = r.u32("header")?;
    }
    let [levels, features_per_level, log2_table_size, base_resolution, raw, hidden_layers, hidden_width, input_dim, n_regions] =
        ints;
    if raw > 1 {
        return Err(FluxError::Format(format!("append_raw_coords flag must be 0 or 1, got {raw}")));
    }
    // A corrupt header must not trigger a huge allocation below.
    if log2_table_size > 28 || levels > 64 || features_per_level > 64 || hidden_width > 1 << 16 || hidden_layers > 64 {
        return Err(FluxError::Format("checkpoint header out of range".into()));
    }
    let growth_factor = r.f64("header")?;
    let bounds = DomainBounds::new(r.f64("bounds")?, r.f64("bounds")?, r.f64("bounds")?, r.f64("bounds")?)
        .map_err(|e| FluxError::Format(format!("checkpoint bounds: {e}")))?;
    let mut regions = Vec::new();
    for _ in 0..n_regions.min(1 << 16) {
        let rect = Rect::new(r.f64("materials")?, r.f64("materials")?, r.f64("materials")?, r.f64("materials")?);
        regions.push((rect, r.f64("materials")?));
    }
    let hash_cfg = HashGridConfig {
        levels,
        features_per_level,
        log2_table_size: log2_table_size as u32,
        base_resolution,
        growth_factor,
        append_raw_coords: raw == 1,
    };
    hash_cfg.validate().map_err(|e| FluxError::Format(format!("checkpoint encoder: {e}")))?;
    let tables = r.f32s(hash_cfg.param_count(), "hash tables")?;
    let hash = HashGrid::from_tables(hash_cfg, tables)?;
    let mut mlp = Mlp::zeros(MlpConfig { input_dim, hidden_layers, hidden_width })
        .map_err(|e| FluxError::Format(format!("checkpoint network: {e}")))?;
    for layer in &mut mlp.layers {
        layer.weight = r.f32s(layer.weight.len(), "weights")?;
        layer.bias = r.f32s(layer.bias.len(), "biases")?;
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FluxError::Format(format!("{} trailing bytes after checkpoint", rest.len())));
    }
    let material = (n_regions > 0).then_some(MaterialChannel { regions });
    FieldModel::from_parts(bounds, hash, mlp, material).map_err(|e| FluxError::Format(format!("checkpoint: {e}")))
}
