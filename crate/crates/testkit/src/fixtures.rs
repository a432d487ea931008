//! Small models and random inputs shared by the checks.

use hoi_core::diffusion::{gaussian, DenoiserConfig, GenCondition};
use hoi_core::memory::{Fusion, MemoryConfig, MemoryVariant};
use hoi_core::nn::derive_rng;
use hoi_core::percept::{BackboneConfig, Conv4dConfig, PerceptConfig, PointCloudSequence, PointFrame};
use hoi_core::seq::{Mode, ModelKind, StackConfig};
use hoi_core::Mat;
use rand::Rng;

pub fn tiny_stack(kind: ModelKind, dim: usize) -> StackConfig {
    StackConfig {
        kind,
        model_dim: dim,
        state_dim: 4,
        conv_width: 3,
        expansion: 2,
        heads: 2,
        eq1_literal: false,
    }
}

pub fn tiny_memory() -> MemoryConfig {
    MemoryConfig {
        short_capacity: 2,
        long_capacity: 2,
        ..MemoryConfig::default()
    }
}

/// Pose width 4, actor width 3, object pose width 2, model width 8.
pub fn tiny_denoiser(mode: Mode, kind: ModelKind) -> DenoiserConfig {
    DenoiserConfig {
        pose_dim: 4,
        actor_dim: 3,
        object_pose_dim: 2,
        depth: 1,
        cond_heads: 2,
        stack: tiny_stack(kind, 8),
        mode,
        memory: tiny_memory(),
        memory_variant: MemoryVariant::Me,
        fusion: Fusion::ConcatMaxpool,
    }
}

pub fn random_condition(cfg: &DenoiserConfig, t_len: usize, seed: u64) -> GenCondition {
    let mut rng = derive_rng(seed, &[11]);
    GenCondition {
        actor: gaussian(&mut rng, t_len, cfg.actor_dim),
        object_pose: gaussian(&mut rng, t_len, cfg.object_pose_dim),
        object_geometry: gaussian(&mut rng, 5, 3),
    }
}

/// Two-level backbone with 8 channels.
pub fn tiny_backbone() -> BackboneConfig {
    let lvl = |r_s| Conv4dConfig {
        out_channels: 8,
        r_s,
        r_t: 1,
        subsample: 2,
    };
    BackboneConfig {
        levels: vec![lvl(0.8), lvl(1.4)],
        out_channels: 8,
        interp_k: 3,
    }
}

pub fn tiny_percept(mode: Mode, kind: ModelKind) -> PerceptConfig {
    PerceptConfig {
        backbone: tiny_backbone(),
        stack: tiny_stack(kind, 8),
        num_classes: 3,
        conv_window: mode,
        temporal_mode: mode,
        memory: tiny_memory(),
        memory_variant: MemoryVariant::Me,
        fusion: Fusion::ConcatMaxpool,
        per_point: false,
    }
}

/// Points uniform in the unit cube around the origin, random unit normals.
pub fn random_clip(t_len: usize, n_pts: usize, seed: u64) -> PointCloudSequence {
    let mut rng = derive_rng(seed, &[12]);
    let frames = (0..t_len)
        .map(|_| {
            let points = Mat::from_vec(n_pts, 3, (0..n_pts * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mut normals = gaussian(&mut rng, n_pts, 3);
            for r in 0..n_pts {
                let row = normals.row_mut(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= n);
            }
            PointFrame { points, normals }
        })
        .collect();
    PointCloudSequence { frames, labels: None }
}
