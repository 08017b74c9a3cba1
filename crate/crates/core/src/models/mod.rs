//! The slice AE and patch SAE, their losses and training loops.

pub mod ae;
pub mod loss;
mod persist;
pub mod sae;
pub mod train;

pub use ae::{AeArchitecture, AeCaches, AeModel, AE_CHANNELS};
pub use loss::{ae_loss, ae_loss_grad, cosine_sim, sae_loss, sae_loss_grad, Cosine, SaeLoss};
pub use sae::{PairPass, SaeArchitecture, SaeCaches, SaeModel, PATCH_SIZE};
pub use train::{train_ae, train_sae, EpochLog, LossCurve, TrainConfig};

use sha2::{Digest, Sha256};

/// Short content id of a serialized checkpoint.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}
