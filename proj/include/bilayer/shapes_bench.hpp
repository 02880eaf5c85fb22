#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bilayer/annotations.hpp"
#include "bilayer/checkpoint.hpp"
#include "bilayer/mask_head.hpp"
#include "bilayer/transformer.hpp"

namespace bilayer {

// ---- synthetic overlapping-shapes data -----------------------------------------

struct ShapeScene {
    ImageU8 image;
    SceneAnnotation ann;  // amodal + modal masks and paint-order ranks
};

struct GenConfig {
    int img_size = 64;
    int min_instances = 2, max_instances = 4;
    double min_overlap = 0.2, max_overlap = 0.5;  // front-over-back amodal fraction
    int classes = 3;                              // ellipse, rectangle, triangle
    double min_visible_fraction = 0.35;
    int max_scene_retries = 500;
};

/// Scenes with exact amodal ground truth; every scene contains at least one
/// front/back pair whose overlap fraction of the back object lies in range.
std::vector<ShapeScene> gen_shapes(Rng& rng, std::size_t n_scenes, const GenConfig& cfg = {});

Dataset scenes_to_dataset(const std::vector<ShapeScene>& scenes);
/// Writes images/NNNNNN.png plus dataset.json under out_dir.
void save_scenes(const std::vector<ShapeScene>& scenes, const std::string& out_dir);
/// Reads dataset.json and the per-scene images back from a directory.
std::vector<ShapeScene> load_scenes(const std::string& dir);

// ---- model variants ---------------------------------------------------------------

enum class BenchVariant {
    SingleFcn,
    SingleGcn,
    BilayerFcn,
    BilayerGcn,
    TransformerSingle,
    TransformerBilayer,
};

std::string variant_name(BenchVariant v);
BenchVariant variant_from_name(const std::string& name);
bool is_transformer(BenchVariant v);

/// One trainable model instance for any bench variant: a small image stem plus
/// either the convolutional mask head or the query decoder.
struct HeadModel {
    BenchVariant variant = BenchVariant::BilayerGcn;
    HeadConfig head_cfg;

    // convolutional path
    Tensor stem_w, stem_b;  // [K,3,3,3]
    BranchParams occluder;  // bilayer variants only
    BranchParams occludee;

    // transformer path
    TransformerConfig tf_cfg;
    StemParams tf_stem;
    QuerySet queries;
    DecoderParams decoder;
    Tensor box_w, box_b;  // occludee box head [D,4]

    static HeadModel init(BenchVariant variant, const HeadConfig& head_cfg,
                          const TransformerConfig& tf_cfg, std::uint64_t seed);
    std::vector<Tensor> params();
    std::size_t param_count();
    Checkpoint to_checkpoint() const;
    static HeadModel from_checkpoint(const Checkpoint& ck);

    /// Stem + head on one [3,R,R] ROI crop.
    HeadOutput forward_roi_bilayer(const Tensor& roi_rgb) const;
    BranchOutput forward_roi_single(const Tensor& roi_rgb) const;
};

// ---- training ------------------------------------------------------------------------

struct TrainConfig {
    std::size_t iterations = 2000;
    std::size_t batch_size = 16;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t warmup_iterations = 100;  // constant reduced LR, then constant base LR
    double warmup_factor = 0.1;
    std::uint64_t seed = 0;
    BenchVariant variant = BenchVariant::BilayerGcn;
    double occlusion_fraction = 0.5;
    LossWeights loss_weights;
    HeadConfig head_cfg;
    TransformerConfig tf_cfg;
};

struct LossRecord {
    std::size_t iteration;
    double total;
    std::vector<double> components;
};

struct TrainResult {
    HeadModel model;
    std::vector<LossRecord> curve;
    std::vector<std::string> component_names;
    double final_loss = 0;
};

/// SGD with momentum on the variant's loss over balanced ROI (or scene) batches.
/// Bitwise deterministic for a fixed (seed, variant, dataset). Throws
/// TrainingError at the first non-finite loss.
TrainResult train(const std::vector<ShapeScene>& dataset, const TrainConfig& cfg);

void save_loss_curve_csv(const TrainResult& r, const std::string& path);

// ---- evaluation ------------------------------------------------------------------------

struct Detection {
    int image_index = 0;
    double score = 0;
    BinaryMask mask;  // full-image grid
};

/// All-point interpolated AP at one IoU threshold; gts are per-image modal masks.
double average_precision(const std::vector<Detection>& dets,
                         const std::vector<std::vector<BinaryMask>>& gts, double iou_threshold);

struct EvalResult {
    double mean_iou = 0;        // occludee mask IoU, mean over instances
    double ap = 0;              // mean over IoU .50:.05:.95
    double ap50 = 0;
    double occluder_iou = 0;    // mean over occluded instances; NaN when n/a
    double wall_clock_sec = 0;
    std::size_t instances = 0;
};

EvalResult evaluate(const HeadModel& model, const std::vector<ShapeScene>& dataset,
                    std::size_t max_dets = 50);

// ---- variant comparison ------------------------------------------------------------------

struct VariantReport {
    BenchVariant variant;
    std::size_t param_count = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<EvalResult> per_seed;
    double mean_iou = 0, sd_iou = 0;
    double mean_ap = 0, sd_ap = 0;
    double mean_ap50 = 0;
};

struct CompareReport {
    std::vector<VariantReport> rows;
    double wall_clock_sec = 0;
};

/// Trains and evaluates every variant on every seed over shared datasets.
/// jobs > 1 runs (variant, seed) cells on worker threads; results do not
/// depend on the job count.
CompareReport compare_variants(const std::vector<BenchVariant>& variants,
                               const std::vector<std::uint64_t>& seeds,
                               const std::vector<ShapeScene>& train_scenes,
                               const std::vector<ShapeScene>& eval_scenes, TrainConfig cfg,
                               std::size_t jobs = 1);

std::string compare_table_text(const CompareReport& report);
std::string compare_report_json(const CompareReport& report);

}  // namespace bilayer
