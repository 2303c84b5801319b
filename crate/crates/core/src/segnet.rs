//! The memory-matching segmentation network.
//!
//! Reference frame+mask pairs are encoded into a key-value memory; the query
//! frame is encoded, attention reads out the memory, and a small decoder
//! produces one soft mask per object. Everything is recorded on a [`Tape`],
//! so outputs are differentiable with respect to the reference masks as well
//! as the weights.

use crate::mask::Mask;
use crate::model::{ModelConfig, Weights};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Weight tensors staged onto a tape, addressable by layer name.
pub struct TapedWeights {
    ids: std::collections::BTreeMap<String, TensorId>,
}

impl TapedWeights {
    pub fn stage<S: Scalar>(
        tape: &mut Tape<S>,
        weights: &Weights<S>,
        requires_grad: bool,
    ) -> Self {
        let ids = weights
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        TapedWeights { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown staged weight {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

/// A reference mask staged on the tape as per-object [1, H, W] planes.
pub struct TapedMask {
    pub planes: Vec<TensorId>,
}

impl TapedMask {
    pub fn stage<S: Scalar>(tape: &mut Tape<S>, mask: &Mask<S>, requires_grad: bool) -> Self {
        let (h, w) = (mask.height(), mask.width());
        let planes = (0..mask.num_objects())
            .map(|o| {
                let t = Tensor::new(vec![1, h, w], mask.plane(o).to_vec());
                tape.leaf(t, requires_grad)
            })
            .collect();
        TapedMask { planes }
    }

    pub fn num_objects(&self) -> usize {
        self.planes.len()
    }
}

fn conv<S: Scalar>(
    tape: &mut Tape<S>,
    tw: &TapedWeights,
    layer: &str,
    input: TensorId,
    stride: usize,
    pad: usize,
) -> TensorId {
    let w = tw.id(&format!("{layer}.w"));
    let b = tw.id(&format!("{layer}.b"));
    tape.conv2d(input, w, b, stride, pad)
}

fn encoder_trunk<S: Scalar>(
    tape: &mut Tape<S>,
    tw: &TapedWeights,
    prefix: &str,
    input: TensorId,
) -> TensorId {
    let x = conv(tape, tw, &format!("{prefix}.conv1"), input, 2, 1);
    let x = tape.relu(x);
    let x = conv(tape, tw, &format!("{prefix}.conv2"), x, 2, 1);
    let x = tape.relu(x);
    conv(tape, tw, &format!("{prefix}.conv3"), x, 1, 1)
}

fn heads<S: Scalar>(
    tape: &mut Tape<S>,
    tw: &TapedWeights,
    features: TensorId,
) -> (TensorId, TensorId) {
    let key = conv(tape, tw, "head.key", features, 1, 0);
    let value = conv(tape, tw, "head.value", features, 1, 0);
    (key, value)
}

fn check_frame<S: Scalar>(tape: &Tape<S>, cfg: &ModelConfig, frame: TensorId) {
    let s = tape.value(frame).shape();
    assert_eq!(
        s,
        [3, cfg.height, cfg.width],
        "frame shape {:?} does not match config {}x{}",
        s,
        cfg.height,
        cfg.width
    );
}

/// Encode a query frame into key/value maps at 1/4 spatial resolution.
pub fn encode_query<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    tw: &TapedWeights,
    frame: TensorId,
) -> (TensorId, TensorId) {
    check_frame(tape, cfg, frame);
    let feat = encoder_trunk(tape, tw, "qenc", frame);
    heads(tape, tw, feat)
}

/// Encode a (frame, single-object mask plane) pair into memory key/value.
/// The mask plane may hold values outside [0,1]; gradient correction feeds
/// unclamped iterates through here.
pub fn encode_memory<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    tw: &TapedWeights,
    frame: TensorId,
    mask_plane: TensorId,
) -> (TensorId, TensorId) {
    check_frame(tape, cfg, frame);
    let ms = tape.value(mask_plane).shape();
    assert_eq!(
        ms,
        [1, cfg.height, cfg.width],
        "mask plane shape {:?} does not match config {}x{}",
        ms,
        cfg.height,
        cfg.width
    );
    let stacked = tape.concat0(&[frame, mask_plane]);
    let feat = encoder_trunk(tape, tw, "menc", stacked);
    heads(tape, tw, feat)
}

/// Scaled dot-product attention readout over all memory positions.
///
/// For each query position, weights = softmax over memory positions of
/// (q . k / sqrt(C_k)); output channels are query-value concatenated with the
/// attention-weighted sum of memory values.
pub fn memory_read<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    query_key: TensorId,
    query_value: TensorId,
    memory_keys: &[TensorId],
    memory_values: &[TensorId],
) -> TensorId {
    assert!(
        !memory_keys.is_empty() && memory_keys.len() == memory_values.len(),
        "memory-read: empty or inconsistent memory"
    );
    let (ck, cv) = (cfg.key_channels, cfg.value_channels);
    let (fh, fw) = cfg.feature_dims();
    let positions = fh * fw;

    // [C_k, h, w] -> [P, C_k]
    let flatten_t = |tape: &mut Tape<S>, id: TensorId, c: usize| {
        let m = tape.reshape(id, vec![c, positions]);
        tape.transpose2(m)
    };

    let q = flatten_t(tape, query_key, ck);
    let mem_k: Vec<TensorId> = memory_keys
        .iter()
        .map(|&k| flatten_t(tape, k, ck))
        .collect();
    let mem_v: Vec<TensorId> = memory_values
        .iter()
        .map(|&v| flatten_t(tape, v, cv))
        .collect();
    let keys = tape.concat0(&mem_k); // [E*P, C_k]
    let values = tape.concat0(&mem_v); // [E*P, C_v]

    let keys_t = tape.transpose2(keys);
    let logits = tape.matmul(q, keys_t); // [P, E*P]
    let scaled = tape.mul_scalar(logits, S::from_f64(1.0 / (ck as f64).sqrt()));
    let attention = tape.softmax(scaled, 1);
    let read = tape.matmul(attention, values); // [P, C_v]
    let read_t = tape.transpose2(read);
    let read_map = tape.reshape(read_t, vec![cv, fh, fw]);
    tape.concat0(&[query_value, read_map])
}

/// Decode an attention readout into a single-object probability plane at the
/// input resolution (conv, two nearest 2x upsamples, final conv, sigmoid).
pub fn decode<S: Scalar>(tape: &mut Tape<S>, tw: &TapedWeights, readout: TensorId) -> TensorId {
    let x = conv(tape, tw, "dec.conv1", readout, 1, 1);
    let x = tape.relu(x);
    let x = tape.upsample2x(x);
    let x = conv(tape, tw, "dec.conv2", x, 1, 1);
    let x = tape.relu(x);
    let x = tape.upsample2x(x);
    let x = conv(tape, tw, "dec.conv3", x, 1, 1);
    tape.sigmoid(x)
}

/// Output of [`segment`]: soft-aggregated normalized per-object planes
/// (each [1, H, W] on the tape) plus the label map from the aggregation.
pub struct SegOutput {
    pub object_planes: Vec<TensorId>,
    pub label_map: Vec<u8>,
}

impl SegOutput {
    /// Materialize the aggregated planes as an off-tape mask.
    pub fn to_mask<S: Scalar>(&self, tape: &Tape<S>) -> Mask<S> {
        let shape = tape.value(self.object_planes[0]).shape();
        let (h, w) = (shape[1], shape[2]);
        let mut data = Vec::with_capacity(self.object_planes.len() * h * w);
        for &p in &self.object_planes {
            data.extend_from_slice(tape.value(p).data());
        }
        Mask::new(Tensor::new(
            vec![self.object_planes.len(), h, w],
            data,
        ))
    }
}

/// Full forward pass: build a per-object memory from the reference set,
/// read out, decode, and soft-aggregate across objects.
pub fn segment<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    tw: &TapedWeights,
    refs: &[(TensorId, &TapedMask)],
    target: TensorId,
) -> SegOutput {
    assert!(!refs.is_empty(), "segment: empty reference set");
    let objects = refs[0].1.num_objects();
    for (_, m) in refs {
        assert_eq!(
            m.num_objects(),
            objects,
            "segment: object count mismatch across references"
        );
    }

    let (qk, qv) = encode_query(tape, cfg, tw, target);

    let mut decoded = Vec::with_capacity(objects);
    for o in 0..objects {
        let mut mem_k = Vec::with_capacity(refs.len());
        let mut mem_v = Vec::with_capacity(refs.len());
        for &(frame, mask) in refs {
            let (k, v) = encode_memory(tape, cfg, tw, frame, mask.planes[o]);
            mem_k.push(k);
            mem_v.push(v);
        }
        let readout = memory_read(tape, cfg, qk, qv, &mem_k, &mem_v);
        decoded.push(decode(tape, tw, readout));
    }
    aggregate_objects(tape, &decoded)
}

/// Soft aggregation: background = prod(1 - p_i), every score normalized so
/// {background, objects} sum to 1 at each pixel; label map is the argmax
/// (0 = background).
pub fn aggregate_objects<S: Scalar>(tape: &mut Tape<S>, planes: &[TensorId]) -> SegOutput {
    assert!(!planes.is_empty(), "aggregate-objects: no object planes");

    // background = prod(1 - p_i)
    let mut bg = {
        let p = planes[0];
        let neg = tape.mul_scalar(p, -S::ONE);
        tape.add_scalar(neg, S::ONE)
    };
    for &p in &planes[1..] {
        let neg = tape.mul_scalar(p, -S::ONE);
        let one_minus = tape.add_scalar(neg, S::ONE);
        bg = tape.mul(bg, one_minus);
    }

    let mut denom = bg;
    for &p in planes {
        denom = tape.add(denom, p);
    }

    let normalized: Vec<TensorId> = planes.iter().map(|&p| tape.div(p, denom)).collect();

    // Argmax over {background, objects} from the raw scores; normalization
    // divides everything by the same positive denominator.
    let n = tape.value(planes[0]).len();
    let mut label_map = vec![0u8; n];
    for i in 0..n {
        let mut best = tape.value(bg).data()[i];
        let mut label = 0u8;
        for (o, &p) in planes.iter().enumerate() {
            let v = tape.value(p).data()[i];
            if v > best {
                best = v;
                label = (o + 1) as u8;
            }
        }
        label_map[i] = label;
    }

    SegOutput {
        object_planes: normalized,
        label_map,
    }
}

/// Stage a frame tensor ([3, H, W], values in [0,1]) onto the tape.
pub fn stage_frame<S: Scalar>(tape: &mut Tape<S>, frame: &Tensor<S>) -> TensorId {
    assert_eq!(frame.shape().len(), 3, "frame must be [3, H, W]");
    tape.constant(frame.clone())
}
