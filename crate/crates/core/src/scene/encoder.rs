use rand::Rng;
use serde::{Deserialize, Serialize};

use super::knn::Neighborhood;
use super::PointCloudScene;
use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// RGB + normal.
pub const AUX_DIM: usize = 6;
/// Position + auxiliary channels.
pub const INPUT_DIM: usize = 3 + AUX_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output width `C_p`.
    pub width: usize,
    /// Neighbors averaged for local context.
    pub knn: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { width: 32, knn: 8 }
    }
}

/// Small point-wise encoder: an MLP on `(position, aux)` with one round of
/// k-NN mean aggregation between its layers.
#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_self: ParamId,
    pub w_nbr: ParamId,
    pub b_mix: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.width;
        let lin = |fan_in: usize, rows: usize, cols: usize, rng: &mut _| {
            Tensor::uniform(&[rows, cols], 1.0 / (fan_in as f64).sqrt(), rng)
        };
        EncoderParams {
            w_in: store.insert("encoder.in.w", lin(INPUT_DIM, INPUT_DIM, c, rng)),
            b_in: store.insert("encoder.in.b", Tensor::zeros(&[c])),
            w_self: store.insert("encoder.self.w", lin(c, c, c, rng)),
            w_nbr: store.insert("encoder.nbr.w", lin(c, c, c, rng)),
            b_mix: store.insert("encoder.mix.b", Tensor::zeros(&[c])),
            w_out: store.insert("encoder.out.w", lin(c, c, c, rng)),
            b_out: store.insert("encoder.out.b", Tensor::zeros(&[c])),
        }
    }

    pub fn lookup(store: &ParamStore) -> Self {
        EncoderParams {
            w_in: store.expect_id("encoder.in.w"),
            b_in: store.expect_id("encoder.in.b"),
            w_self: store.expect_id("encoder.self.w"),
            w_nbr: store.expect_id("encoder.nbr.w"),
            b_mix: store.expect_id("encoder.mix.b"),
            w_out: store.expect_id("encoder.out.w"),
            b_out: store.expect_id("encoder.out.b"),
        }
    }
}

/// Raw `N_p x 9` input matrix.
pub fn point_inputs(scene: &PointCloudScene) -> Vec<f64> {
    scene
        .positions
        .iter()
        .zip(&scene.aux)
        .flat_map(|(p, a)| p.iter().chain(a.iter()).copied())
        .collect()
}

/// Per-point features `P'` of shape `N_p x C_p`. `neighbors` must list, for
/// every point, the points averaged into its context (itself included).
pub fn encode_points(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    scene: &PointCloudScene,
    neighbors: &Neighborhood,
) -> Result<Var> {
    let x = tape.constant(scene.len(), INPUT_DIM, point_inputs(scene))?;
    let w_in = tape.param(store, params.w_in);
    let b_in = tape.param(store, params.b_in);
    let h = tape.matmul(x, w_in)?;
    let h = tape.add_row(h, b_in)?;
    let h = tape.relu(h);

    let ctx = tape.neighbor_mean(h, &neighbors.offsets, &neighbors.neighbors)?;
    let w_self = tape.param(store, params.w_self);
    let w_nbr = tape.param(store, params.w_nbr);
    let b_mix = tape.param(store, params.b_mix);
    let a = tape.matmul(h, w_self)?;
    let b = tape.matmul(ctx, w_nbr)?;
    let m = tape.add(a, b)?;
    let m = tape.add_row(m, b_mix)?;
    let m = tape.relu(m);

    let w_out = tape.param(store, params.w_out);
    let b_out = tape.param(store, params.b_out);
    let out = tape.matmul(m, w_out)?;
    tape.add_row(out, b_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, knn, GeneratorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_and_identical_points() {
        let cfg = GeneratorConfig { n_points: 200, ..Default::default() };
        let (mut scene, _) = generate_scene(&cfg, "e", 4).unwrap();
        // Duplicate point 10 into slot 11.
        scene.positions[11] = scene.positions[10];
        scene.aux[11] = scene.aux[10];
        let nb = knn(&scene.positions, 8).with_self();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = EncoderParams::init(&mut store, &EncoderConfig::default(), &mut rng);
        let mut t = Tape::new();
        let f = encode_points(&mut t, &store, &enc, &scene, &nb).unwrap();
        assert_eq!(t.dims(f), (200, 32));
        assert_eq!(t.row(f, 10), t.row(f, 11));
    }
}
