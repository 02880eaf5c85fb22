#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bilayer/grid.hpp"
#include "bilayer/rng.hpp"

namespace bilayer {

/// One annotated object instance. Masks live on the full image grid.
struct InstanceAnnotation {
    int id = 0;
    int class_id = 0;
    Box bbox;                                  // tight box of modal_mask
    BinaryMask modal_mask;                     // visible pixels
    std::optional<BinaryMask> amodal_mask;     // complete extent, superset of modal
    std::optional<int> occlusion_rank;         // smaller = nearer to camera
};

struct SceneAnnotation {
    int image_id = 0;
    int width = 0, height = 0;
    std::string file_name;
    std::vector<InstanceAnnotation> instances;

    const InstanceAnnotation& find(int instance_id) const;
};

struct Dataset {
    std::vector<SceneAnnotation> scenes;
};

/// Per-ROI training target: the occludee and the grouped occluder, all grids
/// cropped to roi_box.
struct OcclusionPair {
    int target_id = 0;
    int image_id = 0;
    Box roi_box;
    BinaryMask occludee_mask, occludee_boundary;
    BinaryMask occluder_mask, occluder_boundary;

    bool occluded() const { return !occluder_mask.empty_mask(); }
};

// ---- run-length mask encoding ------------------------------------------------
// Counts over row-major pixels, alternating runs starting with zeros.

std::vector<std::uint64_t> rle_encode(const BinaryMask& m);
BinaryMask rle_decode(const std::vector<std::uint64_t>& counts, int h, int w);

// ---- dataset JSON --------------------------------------------------------------

std::string dataset_to_json(const Dataset& ds);
Dataset dataset_from_json(const std::string& json_text);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// ---- ground-truth derivation ----------------------------------------------------

/// Modal rule: occludee = the target's visible mask; occluder = union of the
/// other instances' modal masks that touch the target's bbox, clipped to it.
OcclusionPair derive_pair_modal(const SceneAnnotation& scene, int target_id);

/// Amodal rule: occludee = the target's complete mask; occluder = union of
/// the complete masks of strictly nearer instances that intersect it.
OcclusionPair derive_pair_amodal(const SceneAnnotation& scene, int target_id);

enum class OverlapKind { IoU, OverMin };

/// Box overlap ratio; IoU by default, intersection-over-smaller optionally.
/// Degenerate boxes give 0.
double box_overlap_ratio(const Box& a, const Box& b, OverlapKind kind = OverlapKind::IoU);

/// Image ids whose max pairwise box overlap reaches the threshold, ascending.
std::vector<int> extract_occ_split(const Dataset& ds, double threshold = 0.2,
                                   OverlapKind kind = OverlapKind::IoU);

/// Drops random non-occluded pairs until occluded ones reach target_fraction
/// (or none are left). Occluded pairs always survive; order is preserved.
std::vector<OcclusionPair> balance_sample(const std::vector<OcclusionPair>& pairs, Rng& rng,
                                          double target_fraction = 0.5);

}  // namespace bilayer
