//! Checkpoint format: magic `VCAG`, u32 version, u32 tensor count, then per
//! tensor: u32 name length, UTF-8 name, u8 rank, u32 extents, f32
//! little-endian data. Architecture scalars ride along as `config.*` tensors
//! so a checkpoint is self-describing.

use super::{Model, ModelConfig, ModelError};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VCAG";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn config_entries(cfg: &ModelConfig) -> Vec<(String, Tensor)> {
    let scalar = |v: usize| Tensor::scalar(v as f64);
    let mut out = vec![
        ("config.f_mel".to_string(), scalar(cfg.f_mel)),
        ("config.n_stages".to_string(), scalar(cfg.n_stages)),
        ("config.alpha".to_string(), scalar(cfg.alpha)),
        ("config.frame_h".to_string(), scalar(cfg.frame_h)),
        ("config.frame_w".to_string(), scalar(cfg.frame_w)),
        ("config.frame_c".to_string(), scalar(cfg.frame_c)),
        ("config.d_visual".to_string(), scalar(cfg.d_visual)),
        ("config.d_noise".to_string(), scalar(cfg.d_noise)),
        ("config.d_attn".to_string(), scalar(cfg.d_attn)),
        ("config.disc_channels".to_string(), scalar(cfg.disc_channels)),
        ("config.postnet_channels".to_string(), scalar(cfg.postnet_channels)),
        ("config.gru_layers".to_string(), scalar(cfg.gru_layers)),
        (
            "config.use_attention".to_string(),
            scalar(usize::from(cfg.use_attention)),
        ),
        (
            "config.audio_channels".to_string(),
            Tensor::new(vec![2], cfg.audio_channels.iter().map(|&v| v as f64).collect()),
        ),
        (
            "config.stage_channels".to_string(),
            Tensor::new(
                vec![cfg.stage_channels.len()],
                cfg.stage_channels.iter().map(|&v| v as f64).collect(),
            ),
        ),
        (
            "config.visual_channels".to_string(),
            Tensor::new(
                vec![cfg.visual_channels.len()],
                cfg.visual_channels.iter().map(|&v| v as f64).collect(),
            ),
        ),
    ];
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn config_from_entries(
    get: &dyn Fn(&str) -> Option<Tensor>,
) -> Result<ModelConfig, ModelError> {
    let scalar = |name: &str| -> Result<usize, ModelError> {
        let t = get(name).ok_or_else(|| bad(format!("missing {name}")))?;
        Ok(t.data[0] as usize)
    };
    let list = |name: &str| -> Result<Vec<usize>, ModelError> {
        let t = get(name).ok_or_else(|| bad(format!("missing {name}")))?;
        Ok(t.data.iter().map(|&v| v as usize).collect())
    };
    let audio = list("config.audio_channels")?;
    if audio.len() != 2 {
        return Err(bad("config.audio_channels must have 2 entries"));
    }
    Ok(ModelConfig {
        f_mel: scalar("config.f_mel")?,
        n_stages: scalar("config.n_stages")?,
        alpha: scalar("config.alpha")?,
        frame_h: scalar("config.frame_h")?,
        frame_w: scalar("config.frame_w")?,
        frame_c: scalar("config.frame_c")?,
        d_visual: scalar("config.d_visual")?,
        d_noise: scalar("config.d_noise")?,
        d_attn: scalar("config.d_attn")?,
        stage_channels: list("config.stage_channels")?,
        visual_channels: list("config.visual_channels")?,
        audio_channels: [audio[0], audio[1]],
        disc_channels: scalar("config.disc_channels")?,
        postnet_channels: scalar("config.postnet_channels")?,
        gru_layers: scalar("config.gru_layers")?,
        use_attention: scalar("config.use_attention")? != 0,
    })
}

pub fn save(path: &Path, model: &Model) -> Result<(), ModelError> {
    let mut entries = config_entries(&model.config);
    for id in model.params.ids() {
        entries.push((model.params.name(id).to_string(), model.params.value(id).clone()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.shape.len() as u8);
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(bad("file shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("missing VCAG magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12usize;
    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 4 > bytes.len() {
            return Err(bad("truncated tensor header"));
        }
        let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + name_len + 1 > bytes.len() {
            return Err(bad("truncated tensor name"));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        pos += name_len;
        let rank = bytes[pos] as usize;
        pos += 1;
        if pos + 4 * rank > bytes.len() {
            return Err(bad("truncated extents"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let n: usize = shape.iter().product();
        if pos + 4 * n > bytes.len() {
            return Err(bad(format!("truncated data for {name}")));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let o = pos + 4 * i;
            data.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64);
        }
        pos += 4 * n;
        entries.push((name, Tensor::new(shape, data)));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }

    let lookup = |name: &str| -> Option<Tensor> {
        entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone())
    };
    let config = config_from_entries(&lookup)?;
    let mut model = Model::new(config, 0)?;
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        let loaded = lookup(&name).ok_or_else(|| bad(format!("missing parameter {name}")))?;
        if loaded.shape != model.params.value(id).shape {
            return Err(bad(format!(
                "parameter {name}: shape {:?} does not match architecture {:?}",
                loaded.shape,
                model.params.value(id).shape
            )));
        }
        *model.params.value_mut(id) = loaded;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vcag");
        let model = Model::new(ModelConfig::default(), 42).unwrap();
        save(&path, &model).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, model.config);
        for id in model.params.ids() {
            let name = model.params.name(id);
            let orig = model.params.value(id);
            let that = back.params.lookup(name).unwrap();
            let loaded = back.params.value(that);
            assert_eq!(orig.shape, loaded.shape, "{name}");
            for (a, b) in orig.data.iter().zip(&loaded.data) {
                assert_eq!(*a as f32, *b as f32, "{name}");
            }
        }
    }

    #[test]
    fn no_attention_checkpoints_have_no_attention_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("na.vcag");
        let mut cfg = ModelConfig::default();
        cfg.use_attention = false;
        let model = Model::new(cfg, 1).unwrap();
        save(&path, &model).unwrap();
        let back = load(&path).unwrap();
        assert!(!back.config.use_attention);
        assert!(back.attention.is_none());
    }

    #[test]
    fn corrupt_and_wrong_version_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vcag");
        let model = Model::new(ModelConfig::default(), 2).unwrap();
        save(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(err) => assert!(err.to_string().contains("version"), "{err}"),
            Ok(_) => panic!("wrong version accepted"),
        }
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(load(&path).map(|_| ()).is_err());
    }
}
