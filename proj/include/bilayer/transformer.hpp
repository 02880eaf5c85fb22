#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bilayer/annotations.hpp"
#include "bilayer/checkpoint.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

/// Paired query embeddings. The occluder set is always derived from the
/// occludee set through the two-layer MLP, never learned independently.
struct QuerySet {
    Tensor occludee_q;  // [Q,D] learnable
    Tensor occluder_q;  // [Q,D] derived per forward
    std::size_t q_count = 100;
    std::size_t dim = 32;
};

struct MlpParams {
    Tensor w1, b1, w2, b2;
};

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // [D,D] / [D]
    Tensor ln_gain, ln_bias;
};

struct FfnParams {
    Tensor w1, b1, w2, b2;  // [D,F],[F],[F,D],[D]
    Tensor ln_gain, ln_bias;
};

struct DecoderLayerParams {
    AttentionParams cross;
    AttentionParams self_attn;
    FfnParams ffn;
};

/// One decoder stack with its own mask-embedding MLP and class head.
struct SingleDecoderParams {
    std::vector<DecoderLayerParams> layers;
    MlpParams mask_mlp;
    Tensor class_w, class_b;  // [D,C+1]
};

/// The cascaded pair of decoders plus the occluder-query derivation MLP.
struct DecoderParams {
    SingleDecoderParams occluder;
    SingleDecoderParams occludee;
    MlpParams derive_mlp;
};

struct TransformerConfig {
    std::size_t queries = 100;  // per side
    std::size_t dim = 32;       // D, equals pixel feature channels
    std::size_t layers = 3;
    std::size_t ffn_dim = 64;
    std::size_t classes = 3;    // real classes; class head emits classes+1
};

/// Single-scale pixel features from the toy convolutional stem.
struct PixelFeatures {
    Tensor feat;  // [D,H,W]
    std::size_t h() const { return feat.dim(1); }
    std::size_t w() const { return feat.dim(2); }
};

/// Toy stem: RGB plus two normalized coordinate channels through two 3x3
/// convolutions. Stands in for the multi-scale pixel decoder.
struct StemParams {
    Tensor conv1_w, conv1_b;  // [D,5,3,3]
    Tensor conv2_w, conv2_b;  // [D,D,3,3]
};

PixelFeatures run_stem(const Tensor& image_chw, const StemParams& p);

/// Partial assignment query -> ground truth; -1 marks "no object".
struct MatchResult {
    std::vector<int> query_to_gt;  // size Q
    std::vector<int> gt_to_query;  // size G
    double total_cost = 0;
};

// ---- parameter construction -----------------------------------------------------

QuerySet init_queries(const TransformerConfig& cfg, Rng& rng);
DecoderParams init_decoder(const TransformerConfig& cfg, Rng& rng);
StemParams init_stem(std::size_t dim, Rng& rng);

std::vector<Tensor> decoder_param_list(DecoderParams& p);
std::vector<Tensor> stem_param_list(StemParams& p);
void register_decoder(Checkpoint& ck, const DecoderParams& p, const TransformerConfig& cfg);
DecoderParams load_decoder(const Checkpoint& ck, const TransformerConfig& cfg);

// ---- forward ---------------------------------------------------------------------

/// Occluder queries conditioned on occludee queries: linear-ReLU-linear rows.
Tensor derive_occluder_queries(const Tensor& occludee_q, const MlpParams& mlp);

/// logits[h,w] = MLP(q) . feat[:,h,w] for every query row. Returns [Q,HW].
Tensor mask_from_queries(const Tensor& queries, const PixelFeatures& px, const MlpParams& mask_mlp);

/// Masked cross-attention over pixels, self-attention over queries, then the
/// feed-forward block; residual + layer norm around each. attn_mask has Q*HW
/// entries (1 = attend); an empty vector or an all-false row means attend
/// everywhere.
Tensor decoder_layer(const Tensor& queries, const PixelFeatures& px,
                     const std::vector<std::uint8_t>& attn_mask, const DecoderLayerParams& p);

struct SingleDecodeOutput {
    Tensor embed;         // [Q,D] final embeddings
    Tensor mask_logits;   // [Q,HW]
    Tensor class_logits;  // [Q,C+1]
};

/// One decoder stack with per-layer attention masks thresholded from the
/// previous mask prediction at probability 0.5.
SingleDecodeOutput decode_stack(const Tensor& queries, const PixelFeatures& px,
                                const SingleDecoderParams& p);

struct DecodeOutput {
    SingleDecodeOutput occluder;
    SingleDecodeOutput occludee;
};

/// Decoder-1 on occluder queries, then decoder-2 on occludee queries with the
/// final occluder embeddings injected per index (unless guidance is off).
DecodeOutput bilayer_decode(QuerySet& qs, const PixelFeatures& px, const DecoderParams& p,
                            bool guidance = true);

/// Distance of thresholded attention-mask probabilities from 0.5 since the
/// last reset; lets tests reject inputs where finite differences would flip
/// a mask bit.
void reset_attn_threshold_margin();
double attn_threshold_margin();

// ---- matching and loss ------------------------------------------------------------

/// Min-cost rectangular assignment (G <= Q); ties prefer lower query index.
MatchResult hungarian_match(const std::vector<std::vector<double>>& cost);

/// The occluder side reuses the occludee-side assignment verbatim.
MatchResult copy_assignment(const MatchResult& m);

/// Ground truth for one object in a scene, on the prediction grid.
struct SetGt {
    int class_id = 0;
    BinaryMask occludee_mask;  // the object itself
    BinaryMask occluder_mask;  // grouped occluders, may be empty
    Box box;                   // pixel units on the same grid
};

/// Class NLL + mask BCE + dice matching cost matrix [Q][G] for the occludee
/// side, detached from the tape.
std::vector<std::vector<double>> matching_cost(const SingleDecodeOutput& occludee_out,
                                               const std::vector<SetGt>& gts, std::size_t grid_h,
                                               std::size_t grid_w);

struct SetLossParts {
    Tensor total;
    Tensor class_occludee, class_occluder;
    Tensor mask_bce, dice;
    Tensor box_l1, box_iou;  // undefined when boxes are off
};

/// Matched pairs on both sides: class NLL (all queries; unmatched supervise
/// "no object"), mask BCE and dice summed per pair. Optional occludee-side
/// box loss (L1 + IoU) on sigmoid cxcywh predictions.
SetLossParts set_loss(const DecodeOutput& out, const std::vector<SetGt>& gts,
                      const MatchResult& m, std::size_t grid_h, std::size_t grid_w,
                      const Tensor& box_preds = Tensor());

}  // namespace bilayer
