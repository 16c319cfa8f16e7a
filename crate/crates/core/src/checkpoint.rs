//! Checkpoint format: magic `SGCK`, u32-LE version, a length-prefixed config
//! JSON blob, then named parameter sections (`backbone`, `agg`, `gcn`) and
//! the `buffer` section. Matrices are stored as u32-LE shapes followed by
//! row-major 64-bit little-endian floats; buffer slots as id length + UTF-8
//! id, i32 label, u64 insertion step and the embedding row. Writing is
//! deterministic, so save→load→save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::buffer::{BufferSlot, NodeBuffer};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::trainer::TrainedModel;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_ELEMENTS: u64 = 1 << 31;
const MAX_STRING: u32 = 1 << 16;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) -> Result<()> {
        let len = u32::try_from(s.len())
            .ok()
            .filter(|&l| l <= MAX_STRING)
            .ok_or_else(|| Error::ShapeOverflow(format!("string of {} bytes", s.len())))?;
        self.u32(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn matrix(&mut self, m: &Matrix<f64>) -> Result<()> {
        let rows = u32::try_from(m.rows())
            .map_err(|_| Error::ShapeOverflow(format!("{} rows", m.rows())))?;
        let cols = u32::try_from(m.cols())
            .map_err(|_| Error::ShapeOverflow(format!("{} cols", m.cols())))?;
        self.u32(rows);
        self.u32(cols);
        for &v in m.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        if len > MAX_STRING {
            return Err(Error::ShapeOverflow(format!("{what}: string of {len} bytes")));
        }
        let raw = self.take(len as usize, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse(format!("{what}: invalid UTF-8")))
    }

    fn matrix(&mut self, what: &str, expect: (usize, usize)) -> Result<Matrix<f64>> {
        let rows = self.u32(what)? as u64;
        let cols = self.u32(what)? as u64;
        if rows * cols > MAX_ELEMENTS {
            return Err(Error::ShapeOverflow(format!("{what}: {rows}x{cols}")));
        }
        if (rows as usize, cols as usize) != expect {
            return Err(Error::DimensionMismatch(format!(
                "{what}: stored {rows}x{cols}, config implies {}x{}",
                expect.0, expect.1
            )));
        }
        let raw = self.take(rows as usize * cols as usize * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Matrix::from_vec(rows as usize, cols as usize, data))
    }

    fn section(&mut self, expected: &str) -> Result<()> {
        let name = self.str("section name")?;
        if name != expected {
            return Err(Error::Parse(format!(
                "expected section `{expected}`, found `{name}`"
            )));
        }
        Ok(())
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let config_json =
        serde_json::to_string(&model.config).map_err(|e| Error::Parse(e.to_string()))?;
    w.str(&config_json)?;

    w.str("backbone")?;
    for m in [
        &model.backbone.proj_w,
        &model.backbone.proj_b,
        &model.backbone.attn_v,
        &model.backbone.attn_u,
        &model.backbone.cls_w,
        &model.backbone.cls_b,
    ] {
        w.matrix(m)?;
    }

    w.str("agg")?;
    for m in [&model.agg.w1, &model.agg.b1, &model.agg.w2, &model.agg.b2] {
        w.matrix(m)?;
    }

    w.str("gcn")?;
    for m in [
        &model.gcn.theta1,
        &model.gcn.theta2,
        &model.gcn.w0,
        &model.gcn.w1,
        &model.gcn.mlp1,
        &model.gcn.mlp_b1,
        &model.gcn.mlp2,
        &model.gcn.mlp_b2,
    ] {
        w.matrix(m)?;
    }

    w.str("buffer")?;
    let count = u32::try_from(model.buffer.len())
        .map_err(|_| Error::ShapeOverflow(format!("{} buffer slots", model.buffer.len())))?;
    w.u32(count);
    for slot in model.buffer.slots() {
        w.str(&slot.slide_id)?;
        w.i32(slot.label);
        w.u64(slot.insertion_step);
        for &v in &slot.embedding {
            w.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(&w.buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_json = r.str("config")?;
    let config: TrainConfig =
        serde_json::from_str(&config_json).map_err(|e| Error::Parse(e.to_string()))?;
    config.validate()?;

    let (d_p, d_s, d_a, d_h, d_m, classes, capacity) = (
        config.d_p,
        config.d_s,
        config.attn_dim(),
        config.agg_hidden_dim(),
        config.mlp_hidden_dim(),
        config.classes,
        config.buffer_capacity,
    );

    r.section("backbone")?;
    let backbone = crate::backbone::BackboneParams {
        variant: config.backbone_variant,
        proj_w: r.matrix("backbone.proj_w", (d_p, d_s))?,
        proj_b: r.matrix("backbone.proj_b", (1, d_s))?,
        attn_v: r.matrix("backbone.attn_v", (d_s, d_a))?,
        attn_u: r.matrix("backbone.attn_u", (d_a, 1))?,
        cls_w: r.matrix("backbone.cls_w", (d_s, classes))?,
        cls_b: r.matrix("backbone.cls_b", (1, classes))?,
    };

    r.section("agg")?;
    let agg = crate::graph::AggParams {
        w1: r.matrix("agg.w1", (d_s, d_h))?,
        b1: r.matrix("agg.b1", (1, d_h))?,
        w2: r.matrix("agg.w2", (d_h, d_h))?,
        b2: r.matrix("agg.b2", (1, d_h))?,
    };

    r.section("gcn")?;
    let gcn = crate::hgcn::GcnParams {
        theta1: r.matrix("gcn.theta1", (d_s, d_s))?,
        theta2: r.matrix("gcn.theta2", (d_s, d_s))?,
        w0: r.matrix("gcn.w0", (capacity, capacity))?,
        w1: r.matrix("gcn.w1", (capacity, capacity))?,
        mlp1: r.matrix("gcn.mlp1", (3 * d_s, d_m))?,
        mlp_b1: r.matrix("gcn.mlp_b1", (1, d_m))?,
        mlp2: r.matrix("gcn.mlp2", (d_m, classes))?,
        mlp_b2: r.matrix("gcn.mlp_b2", (1, classes))?,
    };

    r.section("buffer")?;
    let count = r.u32("buffer count")? as usize;
    if count > capacity {
        return Err(Error::CapacityExceeded { batch: count, capacity });
    }
    let mut slots = Vec::with_capacity(count);
    for i in 0..count {
        let slide_id = r.str(&format!("slot {i} id"))?;
        let label = r.i32(&format!("slot {i} label"))?;
        let insertion_step = r.u64(&format!("slot {i} step"))?;
        let raw = r.take(d_s * 8, &format!("slot {i} embedding"))?;
        let embedding = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        slots.push(BufferSlot { embedding, slide_id, label, insertion_step });
    }
    let buffer = NodeBuffer::from_slots(capacity, d_s, slots)?;

    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after the buffer section",
            bytes.len() - r.pos
        )));
    }

    Ok(TrainedModel { config, backbone, agg, gcn, buffer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_bags, SyntheticSpec};
    use crate::trainer::{infer_slide, train_collaborative};

    fn small_model() -> TrainedModel {
        let cfg = TrainConfig {
            buffer_capacity: 16,
            batch_size: 4,
            warmup_epochs: 1,
            epochs: 1,
            d_p: 5,
            d_s: 6,
            classes: 2,
            k: 2,
            ..TrainConfig::default()
        };
        let spec = SyntheticSpec {
            num_slides: 10,
            classes: 2,
            instances_min: 2,
            instances_max: 4,
            feature_dim: 5,
            witness_rate: 0.5,
            prototype_separation: 5.0,
            noise_sigma: 0.5,
            seed: 12,
        };
        let bags = generate_bags(&spec).unwrap().0;
        let refs: Vec<_> = bags.iter().collect();
        train_collaborative(&refs, &cfg, 17, None, &mut |_| {}).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.sgck");
        let p2 = dir.path().join("m2.sgck");
        let model = small_model();
        save_model(&p1, &model).unwrap();
        let loaded = load_model(&p1).unwrap();
        save_model(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sgck");
        let model = small_model();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();

        let spec = SyntheticSpec {
            num_slides: 4,
            classes: 2,
            instances_min: 2,
            instances_max: 4,
            feature_dim: 5,
            witness_rate: 0.5,
            prototype_separation: 5.0,
            noise_sigma: 0.5,
            seed: 99,
        };
        let bags = generate_bags(&spec).unwrap().0;
        for bag in &bags {
            let a = infer_slide(bag, &model).unwrap();
            let b = infer_slide(bag, &loaded).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sgck");
        std::fs::write(&path, b"XXXX0000").unwrap();
        assert!(matches!(load_model(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.sgck");
        let model = small_model();
        save_model(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.sgck");
        let model = small_model();
        save_model(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"junk");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Parse(_))));
    }
}
