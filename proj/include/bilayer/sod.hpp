#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bilayer/annotations.hpp"
#include "bilayer/grid.hpp"
#include "bilayer/rng.hpp"

namespace bilayer {

/// One complete (non-occluded) object cutout from the bank.
struct ObjectCut {
    int class_id = 0;
    ImageU8 patch;        // bbox-cropped pixels
    BinaryMask mask;      // bbox-cropped complete mask
    BinaryMask contour;   // boundary band of the mask
    int source_image = 0;
    int source_instance = 0;
    int origin_x = 0, origin_y = 0;  // bbox origin inside the source image
};

struct SodConfig {
    double min_overlap = 0.2;
    double max_overlap = 0.5;
    std::size_t min_area = 1024;       // 32x32
    double max_box_overlap = 0.05;     // bank exclusion threshold
    int stride = 4;                    // grid-search step in pixels
    int max_pair_retries = 1000;
};

/// One composited occlusion sample. Both annotations carry amodal masks;
/// the occluder is topmost so its modal mask equals the amodal one.
struct SyntheticSample {
    ImageU8 image;
    InstanceAnnotation occludee;   // amodal + modal (amodal minus occluder)
    InstanceAnnotation occluder;
    BinaryMask occludee_contour, occluder_contour;  // amodal boundary bands
    int placement_x = 0, placement_y = 0;
    double overlap_rate = 0;
    int occluder_source = 0, occludee_source = 0;  // bank instance ids
};

/// Complete Object Bank: instances whose mask area reaches min_area and whose
/// bbox overlaps every other bbox in the scene by at most max_box_overlap.
std::vector<ObjectCut> build_cob(const Dataset& ds, const std::vector<ImageU8>& images,
                                 const SodConfig& cfg = {});

/// Class drawn uniformly over distinct classes, instance uniformly within the
/// class, independently for occluder and occludee.
std::pair<const ObjectCut*, const ObjectCut*> sample_pair(const std::vector<ObjectCut>& cob,
                                                          Rng& rng);

/// Fraction of the occludee mask hidden by the occluder at a placement.
double overlap_rate(const BinaryMask& occluder_at_pos, const BinaryMask& occludee_mask);

struct Placement {
    int x = 0, y = 0;
    double rate = 0;
};

/// Stride-spaced positions where the occluder fits fully inside the image and
/// covers an in-range fraction of the occludee; one is picked uniformly.
Placement grid_search_place(const ObjectCut& occluder, const BinaryMask& occludee_scene_mask,
                            int image_h, int image_w, const SodConfig& cfg, Rng& rng);

/// Paste the occluder at the placement and derive all ground truth.
SyntheticSample compose(const ImageU8& scene, const BinaryMask& occludee_scene_mask,
                        int occludee_class, const ObjectCut& occluder, const Placement& placement);

/// Full pipeline for one sample index: pair sampling with placement retries.
SyntheticSample synthesize_one(const std::vector<ObjectCut>& cob,
                               const std::vector<ImageU8>& images, const Dataset& ds,
                               const SodConfig& cfg, Rng& rng);

/// Writes images/NNNNNN.png, masks/NNNNNN_{occluder,occludee}_{modal,amodal}.png
/// and manifest.json under out_dir.
void generate_sod(const Dataset& ds, const std::vector<ImageU8>& images, std::size_t count,
                  std::uint64_t seed, const std::string& out_dir, const SodConfig& cfg = {});

/// Loads the scene image for every dataset entry from base_dir/file_name.
std::vector<ImageU8> load_scene_images(const Dataset& ds, const std::string& base_dir);

}  // namespace bilayer
