#pragma once

#include <string>
#include <vector>

#include "bilayer/annotations.hpp"
#include "bilayer/checkpoint.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

/// Non-local block parameters: 1x1 query/key transforms into the attention
/// dimension, the square output transform, and the layer-norm affine.
struct NonLocalParams {
    Tensor theta_w, theta_b;  // [K,Katt], [Katt]
    Tensor phi_w, phi_b;      // [K,Katt], [Katt]
    Tensor wg;                // [K,K]
    Tensor ln_gain, ln_bias;  // [K]
};

enum class HeadVariant { GCN, FCN };

/// One branch of the mask head: 3x3 conv, a non-local block (or a second
/// 3x3 conv), a 3x3 conv, then x2 upsampling feeding two 1-channel
/// predictors for boundary and mask.
struct BranchParams {
    Tensor pre_w, pre_b;            // [K,K,3,3], [K]
    NonLocalParams nonlocal;        // GCN variant
    Tensor mid_w, mid_b;            // [K,K,3,3], [K]  (FCN variant replacement)
    Tensor fcn_w, fcn_b;            // [K,K,3,3], [K]
    Tensor fuse_w;                  // [K,K], occluder branch only
    Tensor boundary_w, boundary_b;  // [1,K,1,1], [1]
    Tensor mask_w, mask_b;          // [1,K,1,1], [1]
};

struct HeadConfig {
    std::size_t channels = 32;        // K
    std::size_t att_dim = 16;         // K/2 by default
    std::size_t roi = 14;             // ROI grid side
    HeadVariant variant = HeadVariant::GCN;
    bool bilayer = true;
    double predictor_bias_init = 0.0;   // optional background prior for the logit heads
    double predictor_weight_scale = 1.0;
};

struct HeadOutput {
    Tensor z0;  // occluder branch feature, [N,K]
    Tensor xf;  // fused occlusion-aware feature, [N,K]
    Tensor z1;  // occludee branch feature, [N,K]
    Tensor occluder_boundary_logits, occluder_mask_logits;  // [1,2H,2W]
    Tensor occludee_boundary_logits, occludee_mask_logits;  // [1,2H,2W]
};

struct LossWeights {
    double occluder_boundary = 0.5;   // lambda2
    double occluder_mask = 0.25;      // lambda3
    double occludee_boundary = 0.5;   // lambda4
    double occludee_mask = 1.0;       // lambda5
};

struct HeadLosses {
    Tensor total;
    Tensor occluder_boundary, occluder_mask, occludee_boundary, occludee_mask;
};

// ---- parameter construction ---------------------------------------------------

NonLocalParams init_nonlocal(std::size_t k, std::size_t att_dim, Rng& rng);
BranchParams init_branch(const HeadConfig& cfg, Rng& rng, bool with_fuse);

std::vector<Tensor> branch_params(BranchParams& p, HeadVariant variant, bool with_fuse);
void register_branch(Checkpoint& ck, const std::string& prefix, const BranchParams& p,
                     HeadVariant variant, bool with_fuse);
BranchParams load_branch(const Checkpoint& ck, const std::string& prefix, HeadVariant variant,
                         bool with_fuse);

// ---- forward ops ----------------------------------------------------------------

/// Softmax-normalized pairwise feature similarity, rows sum to one.
/// A[i,j] = softmax_j(theta(x_i) . phi(x_j)).
Tensor adjacency(const Tensor& x, const NonLocalParams& p);

/// Z = sigma(A X Wg) + X with sigma = layer norm then ReLU.
Tensor gcn_layer(const Tensor& x, const NonLocalParams& p);

struct BranchOutput {
    Tensor z;                        // [N,K] feature at the non-local stage
    Tensor boundary_logits, mask_logits;  // [1,2H,2W]
};

/// One full branch on a [K,H,W] ROI feature.
BranchOutput run_branch(const Tensor& x_roi, const BranchParams& p, HeadVariant variant);

/// X_f = Z0 Wf + X_roi on node-layout features.
Tensor fuse(const Tensor& z0, const Tensor& fuse_w, const Tensor& x_roi_nodes);

/// Occluder branch then occludee branch on the fused feature.
HeadOutput forward_bilayer(const Tensor& x_roi, const BranchParams& occluder_p,
                           const BranchParams& occludee_p, HeadVariant variant);

/// Single-layer ablation: one branch straight on the ROI feature.
BranchOutput forward_single(const Tensor& x_roi, const BranchParams& p, HeadVariant variant);

// ---- losses ----------------------------------------------------------------------

/// Binary {0,1} tensor from a mask resized to (h,w) by area binarization.
Tensor mask_target(const BinaryMask& m, std::size_t h, std::size_t w);

/// Weighted BCE losses of the four heads against the pair's ground truth.
/// GT masks are downscaled to logit resolution; boundaries are recomputed
/// there so the band width stays meaningful.
HeadLosses head_losses(const HeadOutput& out, const OcclusionPair& gt, const LossWeights& w);

/// Occludee-only variant for single-layer heads.
HeadLosses single_losses(const BranchOutput& out, const OcclusionPair& gt, const LossWeights& w);

}  // namespace bilayer
