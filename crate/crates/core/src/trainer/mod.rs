//! Warm-up of the slot autoencoder, game training of the players and the
//! alternating reward-injected loop.

mod em;
mod game;
mod warmup;


pub use em::{em_loop, em_loss, em_step_slots, EmLoss, EmReport, M1Step};
pub use game::{extract_slots, reinforce_loss, train_game_epoch, EpochStats, SlotCache, TrainConfig};
pub use warmup::{eval_noise_key, mean_recon_loss, warmup_slots, WarmupConfig, WarmupEpoch};
