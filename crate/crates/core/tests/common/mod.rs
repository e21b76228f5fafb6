#![allow(dead_code)]

use teamadapt::trainer::{TrainConfig, Trainer};

/// Foraging config shrunk so a few hundred steps run in well under a second.
pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::lbf_default();
    c.context.hidden = 8;
    c.qmix.hidden = 8;
    c.qmix.mixer_embed = 4;
    c.qmix.sync_interval = 5;
    c.crp.d_model = 8;
    c.crp.embed_dim = 4;
    c.crp.n_layers = 1;
    c.crp.decoder_hidden = 4;
    c.crp.train_steps = 5;
    c.crp.batch_trajectories = 4;
    c.pool.trajectories_per_group = 4;
    c.pool.groups_per_iteration = 3;
    c.pool.max_groups = 6;
    c.pool.generation_interval = 200;
    c.trainer.batch_size = 4;
    c.trainer.replay_capacity = 50;
    c.trainer.seed = seed;
    c.trainer.total_env_steps = 500;
    c.trainer.checkpoint_interval = 0;
    c
}

/// A trainer whose replay already holds at least `episodes` episodes.
pub fn warm_trainer(config: TrainConfig, episodes: usize) -> Trainer {
    let mut t = Trainer::new(config, None).expect("trainer");
    while t.replay.len() < episodes {
        t.train_episode().expect("episode");
    }
    t
}
