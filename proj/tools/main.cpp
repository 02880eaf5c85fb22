#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bilayer/checkpoint.hpp"
#include "bilayer/gradcheck_suite.hpp"
#include "bilayer/png_io.hpp"
#include "bilayer/shapes_bench.hpp"
#include "bilayer/sod.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bilayer;

namespace {

// --config support: the JSON file's values are injected as arguments right
// after the subcommand name; every option takes the last occurrence, so flags
// typed on the command line always win.
std::vector<std::string> inject_config(CLI::App& app, std::vector<std::string> args) {
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size())
            config_path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0)
            config_path = args[i].substr(9);
    }
    if (config_path.empty()) return args;
    json values;
    try {
        values = json::parse(read_file(config_path));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse failed: ") + e.what());
    }
    std::size_t sub_pos = args.size();
    CLI::App* sub = nullptr;
    for (std::size_t i = 0; i < args.size() && !sub; ++i) {
        if (args[i].empty() || args[i][0] == '-') continue;
        try {
            sub = app.get_subcommand(args[i]);
            sub_pos = i;
        } catch (const CLI::OptionNotFound&) {
            // an option value, not the subcommand
        }
    }
    if (!sub) return args;
    std::vector<std::string> inject;
    for (const auto& [key, v] : values.items()) {
        if (key == "config") continue;
        if (!sub->get_option_no_throw("--" + key)) continue;
        inject.push_back("--" + key + "=" + (v.is_string() ? v.get<std::string>() : v.dump()));
    }
    args.insert(args.begin() + std::ptrdiff_t(sub_pos) + 1, inject.begin(), inject.end());
    return args;
}

std::string read_split_ids(const std::vector<int>& ids) {
    std::ostringstream os;
    for (int id : ids) os << id << "\n";
    return os.str();
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) seeds.push_back(std::stoull(tok));
    if (seeds.empty()) throw ConfigError("no seeds given");
    return seeds;
}

std::vector<BenchVariant> parse_variant_list(const std::string& csv) {
    std::vector<BenchVariant> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(variant_from_name(tok));
    if (out.empty()) throw ConfigError("no variants given");
    return out;
}

void write_gray_prob_png(const std::string& path, const Tensor& logits) {
    const std::size_t h = logits.dim(1), w = logits.dim(2);
    std::vector<std::uint8_t> px(h * w);
    for (std::size_t i = 0; i < px.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-logits.value()[i]));
        px[i] = std::uint8_t(std::lround(p * 255.0));
    }
    write_png_gray(path, px, int(h), int(w));
}

int run(int argc, char** argv) {
    CLI::App app{"Bilayer occluder/occludee instance segmentation toolkit"};
    app.require_subcommand(1);
    app.fallthrough(false);

    std::string config_path;
    app.add_option("--config", config_path, "JSON file with default values for any flag");

    // gradcheck ---------------------------------------------------------------
    auto* cmd_gradcheck = app.add_subcommand(
        "gradcheck", "Finite-difference verification of every operator and both heads");
    std::uint64_t gc_seed = 0;
    std::size_t gc_trials = 20;
    double gc_tolerance = 1e-4;
    cmd_gradcheck->add_option("--seed", gc_seed, "RNG seed")->capture_default_str();
    cmd_gradcheck->add_option("--trials", gc_trials, "random trials per operator")
        ->capture_default_str();
    cmd_gradcheck->add_option("--tolerance", gc_tolerance, "max relative error accepted")
        ->capture_default_str();

    // gen-shapes --------------------------------------------------------------
    auto* cmd_gen = app.add_subcommand("gen-shapes", "Generate an overlapping-shapes dataset");
    std::uint64_t gen_seed = 0;
    std::size_t gen_count = 100;
    int gen_size = 64;
    int gen_min_inst = 2, gen_max_inst = 4;
    std::string gen_out;
    cmd_gen->add_option("--seed", gen_seed, "RNG seed")->capture_default_str();
    cmd_gen->add_option("--count", gen_count, "number of scenes")->capture_default_str();
    cmd_gen->add_option("--size", gen_size, "image side in pixels")->capture_default_str();
    cmd_gen->add_option("--min-instances", gen_min_inst, "min shapes per scene")
        ->capture_default_str();
    cmd_gen->add_option("--max-instances", gen_max_inst, "max shapes per scene")
        ->capture_default_str();
    cmd_gen->add_option("--out", gen_out, "output directory")->required();

    // sod-synth ----------------------------------------------------------------
    auto* cmd_sod = app.add_subcommand("sod-synth", "Compose a synthetic occlusion dataset");
    std::string sod_dataset, sod_out;
    std::uint64_t sod_seed = 0;
    std::size_t sod_count = 1000;
    int sod_stride = 4;
    double sod_min_overlap = 0.2, sod_max_overlap = 0.5;
    cmd_sod->add_option("--dataset", sod_dataset, "directory with dataset.json and images/")
        ->required();
    cmd_sod->add_option("--out", sod_out, "output directory")->required();
    cmd_sod->add_option("--seed", sod_seed, "RNG seed")->capture_default_str();
    cmd_sod->add_option("--count", sod_count, "samples to generate")->capture_default_str();
    cmd_sod->add_option("--stride", sod_stride, "grid-search step in pixels")
        ->capture_default_str();
    cmd_sod->add_option("--min-overlap", sod_min_overlap, "lowest accepted overlap rate")
        ->capture_default_str();
    cmd_sod->add_option("--max-overlap", sod_max_overlap, "highest accepted overlap rate")
        ->capture_default_str();

    // derive-occ -----------------------------------------------------------------
    auto* cmd_derive = app.add_subcommand(
        "derive-occ", "Derive occluder/occludee pairs for every instance");
    std::string derive_dataset, derive_out, derive_rule = "modal";
    bool derive_balance = false;
    double derive_fraction = 0.5;
    std::uint64_t derive_seed = 0;
    cmd_derive->add_option("--dataset", derive_dataset, "dataset.json path or its directory")
        ->required();
    cmd_derive->add_option("--out", derive_out, "output pairs JSON")->required();
    cmd_derive->add_option("--rule", derive_rule, "modal or amodal")->capture_default_str();
    cmd_derive->add_flag("--balance", derive_balance,
                         "drop non-occluded pairs to reach the occlusion fraction");
    cmd_derive->add_option("--fraction", derive_fraction, "occluded fraction for --balance")
        ->capture_default_str();
    cmd_derive->add_option("--seed", derive_seed, "RNG seed for --balance")->capture_default_str();

    // split-occ ---------------------------------------------------------------------
    auto* cmd_split = app.add_subcommand(
        "split-occ", "Select images whose max pairwise box overlap reaches a threshold");
    std::string split_dataset, split_out, split_kind = "iou";
    double split_threshold = 0.2;
    cmd_split->add_option("--dataset", split_dataset, "dataset.json path or its directory")
        ->required();
    cmd_split->add_option("--out", split_out, "output id list (one per line)")->required();
    cmd_split->add_option("--threshold", split_threshold, "overlap threshold")
        ->capture_default_str();
    cmd_split->add_option("--overlap-kind", split_kind, "iou or min (intersection over smaller)")
        ->capture_default_str();

    // train ----------------------------------------------------------------------------
    auto* cmd_train = app.add_subcommand("train", "Train one variant on a shapes dataset");
    std::string train_dataset, train_out, train_curve, train_variant = "bilayer-gcn";
    TrainConfig tc;
    std::uint64_t train_seed = 0;
    cmd_train->add_option("--dataset", train_dataset, "directory with dataset.json and images/")
        ->required();
    cmd_train->add_option("--out", train_out, "checkpoint output path")->required();
    cmd_train->add_option("--curve", train_curve, "loss-curve CSV output path");
    cmd_train->add_option("--variant", train_variant,
                          "single-fcn|single-gcn|bilayer-fcn|bilayer-gcn|transformer-single|"
                          "transformer-bilayer")
        ->capture_default_str();
    cmd_train->add_option("--seed", train_seed, "RNG seed")->capture_default_str();
    cmd_train->add_option("--iterations", tc.iterations, "SGD iterations")->capture_default_str();
    cmd_train->add_option("--batch-size", tc.batch_size, "examples per iteration")
        ->capture_default_str();
    cmd_train->add_option("--learning-rate", tc.learning_rate, "base learning rate")
        ->capture_default_str();
    cmd_train->add_option("--momentum", tc.momentum, "SGD momentum")->capture_default_str();
    cmd_train->add_option("--warmup", tc.warmup_iterations, "constant reduced-LR iterations")
        ->capture_default_str();
    cmd_train->add_option("--occlusion-fraction", tc.occlusion_fraction,
                          "occluded share after balance sampling")
        ->capture_default_str();
    cmd_train->add_option("--channels", tc.head_cfg.channels, "head feature channels")
        ->capture_default_str();
    cmd_train->add_option("--att-dim", tc.head_cfg.att_dim, "non-local attention dimension")
        ->capture_default_str();
    cmd_train->add_option("--roi", tc.head_cfg.roi, "ROI grid side")->capture_default_str();
    cmd_train->add_option("--queries", tc.tf_cfg.queries, "transformer queries per side")
        ->capture_default_str();
    cmd_train->add_option("--dim", tc.tf_cfg.dim, "transformer embedding dim")
        ->capture_default_str();
    cmd_train->add_option("--layers", tc.tf_cfg.layers, "transformer decoder layers")
        ->capture_default_str();

    // eval -----------------------------------------------------------------------------
    auto* cmd_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a shapes dataset");
    std::string eval_dataset, eval_ckpt, eval_out;
    std::size_t eval_max_dets = 50;
    cmd_eval->add_option("--dataset", eval_dataset, "directory with dataset.json and images/")
        ->required();
    cmd_eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    cmd_eval->add_option("--out", eval_out, "report JSON output path");
    cmd_eval->add_option("--max-dets", eval_max_dets, "detection cap per image")
        ->capture_default_str();

    // compare --------------------------------------------------------------------------
    auto* cmd_cmp = app.add_subcommand(
        "compare", "Train and evaluate a variant grid over several seeds");
    std::string cmp_train_ds, cmp_eval_ds, cmp_out_json, cmp_out_table;
    std::string cmp_variants = "single-fcn,single-gcn,bilayer-fcn,bilayer-gcn";
    std::string cmp_seeds = "0,1,2";
    std::size_t cmp_jobs = 1;
    TrainConfig cmp_tc;
    cmd_cmp->add_option("--train-dataset", cmp_train_ds, "training dataset directory")->required();
    cmd_cmp->add_option("--eval-dataset", cmp_eval_ds, "held-out dataset directory")->required();
    cmd_cmp->add_option("--variants", cmp_variants, "comma-separated variant list")
        ->capture_default_str();
    cmd_cmp->add_option("--seeds", cmp_seeds, "comma-separated seed list")->capture_default_str();
    cmd_cmp->add_option("--jobs", cmp_jobs, "parallel training workers")->capture_default_str();
    cmd_cmp->add_option("--iterations", cmp_tc.iterations, "SGD iterations per run")
        ->capture_default_str();
    cmd_cmp->add_option("--batch-size", cmp_tc.batch_size, "examples per iteration")
        ->capture_default_str();
    cmd_cmp->add_option("--learning-rate", cmp_tc.learning_rate, "base learning rate")
        ->capture_default_str();
    cmd_cmp->add_option("--warmup", cmp_tc.warmup_iterations, "constant reduced-LR iterations")
        ->capture_default_str();
    cmd_cmp->add_option("--channels", cmp_tc.head_cfg.channels, "head feature channels")
        ->capture_default_str();
    cmd_cmp->add_option("--att-dim", cmp_tc.head_cfg.att_dim, "non-local attention dimension")
        ->capture_default_str();
    cmd_cmp->add_option("--out", cmp_out_json, "report JSON output path");
    cmd_cmp->add_option("--table", cmp_out_table, "aligned text table output path");

    // dump-heatmaps -----------------------------------------------------------------------
    auto* cmd_dump = app.add_subcommand(
        "dump-heatmaps", "Write occluder/occludee probability maps for one scene");
    std::string dump_dataset, dump_ckpt, dump_out;
    int dump_image = 1;
    std::size_t dump_max_dets = 50;
    cmd_dump->add_option("--dataset", dump_dataset, "directory with dataset.json and images/")
        ->required();
    cmd_dump->add_option("--checkpoint", dump_ckpt, "checkpoint path")->required();
    cmd_dump->add_option("--image", dump_image, "image id to visualize")->capture_default_str();
    cmd_dump->add_option("--out", dump_out, "output directory")->required();
    cmd_dump->add_option("--max-dets", dump_max_dets, "query cap for transformer checkpoints")
        ->capture_default_str();

    for (CLI::App* sub : app.get_subcommands(nullptr))
        for (CLI::Option* opt : sub->get_options())
            if (opt->get_expected_max() == 1)
                opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    try {
        std::vector<std::string> args =
            inject_config(app, std::vector<std::string>(argv + 1, argv + argc));
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        std::cout << app.help() << std::endl;
        std::cerr << "ERROR usage: " << e.what() << std::endl;
        return 1;
    }

    auto dataset_json_path = [](const std::string& arg) {
        fs::path p(arg);
        if (fs::is_directory(p)) p /= "dataset.json";
        return p.string();
    };

    if (cmd_gradcheck->parsed()) {
        GradCheckReport report = run_gradcheck_suite(gc_trials, gc_seed);
        report.tolerance = gc_tolerance;
        for (const auto& e : report.entries)
            std::printf("%-34s max_rel_error=%.3e  trials=%zu\n", e.name.c_str(),
                        e.max_rel_error, e.trials);
        std::printf("%s (tolerance %.1e)\n", report.passed() ? "PASS" : "FAIL", report.tolerance);
        return report.passed() ? 0 : 1;
    }

    if (cmd_gen->parsed()) {
        GenConfig cfg;
        cfg.img_size = gen_size;
        cfg.min_instances = gen_min_inst;
        cfg.max_instances = gen_max_inst;
        Rng rng = make_rng(gen_seed);
        std::vector<ShapeScene> scenes = gen_shapes(rng, gen_count, cfg);
        save_scenes(scenes, gen_out);
        std::printf("wrote %zu scenes to %s\n", scenes.size(), gen_out.c_str());
        return 0;
    }

    if (cmd_sod->parsed()) {
        Dataset ds = load_dataset(dataset_json_path(sod_dataset));
        std::vector<ImageU8> images = load_scene_images(ds, sod_dataset);
        SodConfig cfg;
        cfg.stride = sod_stride;
        cfg.min_overlap = sod_min_overlap;
        cfg.max_overlap = sod_max_overlap;
        generate_sod(ds, images, sod_count, sod_seed, sod_out, cfg);
        std::printf("wrote %zu samples to %s\n", sod_count, sod_out.c_str());
        return 0;
    }

    if (cmd_derive->parsed()) {
        Dataset ds = load_dataset(dataset_json_path(derive_dataset));
        std::vector<OcclusionPair> pairs;
        for (const auto& scene : ds.scenes)
            for (const auto& inst : scene.instances) {
                if (derive_rule == "modal")
                    pairs.push_back(derive_pair_modal(scene, inst.id));
                else if (derive_rule == "amodal")
                    pairs.push_back(derive_pair_amodal(scene, inst.id));
                else
                    throw ConfigError("--rule must be modal or amodal");
            }
        if (derive_balance) {
            Rng rng = make_rng(derive_seed);
            pairs = balance_sample(pairs, rng, derive_fraction);
        }
        json out = json::array();
        for (const auto& p : pairs) {
            out.push_back({{"target_id", p.target_id},
                           {"image_id", p.image_id},
                           {"roi_box", {p.roi_box.x, p.roi_box.y, p.roi_box.w, p.roi_box.h}},
                           {"height", p.occludee_mask.h},
                           {"width", p.occludee_mask.w},
                           {"occludee_rle", rle_encode(p.occludee_mask)},
                           {"occludee_boundary_rle", rle_encode(p.occludee_boundary)},
                           {"occluder_rle", rle_encode(p.occluder_mask)},
                           {"occluder_boundary_rle", rle_encode(p.occluder_boundary)},
                           {"occluded", p.occluded()}});
        }
        write_file_atomic(derive_out, json{{"pairs", out}}.dump(2) + "\n");
        std::printf("wrote %zu pairs to %s\n", pairs.size(), derive_out.c_str());
        return 0;
    }

    if (cmd_split->parsed()) {
        Dataset ds = load_dataset(dataset_json_path(split_dataset));
        OverlapKind kind;
        if (split_kind == "iou")
            kind = OverlapKind::IoU;
        else if (split_kind == "min")
            kind = OverlapKind::OverMin;
        else
            throw ConfigError("--overlap-kind must be iou or min");
        std::vector<int> ids = extract_occ_split(ds, split_threshold, kind);
        write_file_atomic(split_out, read_split_ids(ids));
        std::printf("selected %zu of %zu images\n", ids.size(), ds.scenes.size());
        return 0;
    }

    if (cmd_train->parsed()) {
        tc.variant = variant_from_name(train_variant);
        tc.seed = train_seed;
        std::vector<ShapeScene> scenes = load_scenes(train_dataset);
        TrainResult result = train(scenes, tc);
        result.model.to_checkpoint().save(train_out);
        if (!train_curve.empty()) save_loss_curve_csv(result, train_curve);
        std::printf("final loss %.6f after %zu iterations; checkpoint %s\n", result.final_loss,
                    tc.iterations, train_out.c_str());
        return 0;
    }

    if (cmd_eval->parsed()) {
        std::vector<ShapeScene> scenes = load_scenes(eval_dataset);
        HeadModel model = HeadModel::from_checkpoint(Checkpoint::load(eval_ckpt));
        EvalResult r = evaluate(model, scenes, eval_max_dets);
        // timing stays on stdout so report files are byte-stable across runs
        json out = {{"variant", variant_name(model.variant)},
                    {"mean_iou", r.mean_iou},
                    {"ap", r.ap},
                    {"ap50", r.ap50},
                    {"occluder_iou", std::isnan(r.occluder_iou) ? json(nullptr)
                                                                : json(r.occluder_iou)},
                    {"instances", r.instances}};
        if (!eval_out.empty()) write_file_atomic(eval_out, out.dump(2) + "\n");
        std::printf("%s: mean IoU %.4f  AP %.4f  AP50 %.4f  (%.2f s)\n",
                    variant_name(model.variant).c_str(), r.mean_iou, r.ap, r.ap50,
                    r.wall_clock_sec);
        return 0;
    }

    if (cmd_cmp->parsed()) {
        std::vector<ShapeScene> train_scenes = load_scenes(cmp_train_ds);
        std::vector<ShapeScene> eval_scenes = load_scenes(cmp_eval_ds);
        CompareReport report =
            compare_variants(parse_variant_list(cmp_variants), parse_seed_list(cmp_seeds),
                             train_scenes, eval_scenes, cmp_tc, cmp_jobs);
        const std::string table = compare_table_text(report);
        std::fputs(table.c_str(), stdout);
        if (!cmp_out_table.empty()) write_file_atomic(cmp_out_table, table);
        if (!cmp_out_json.empty()) write_file_atomic(cmp_out_json, compare_report_json(report));
        return 0;
    }

    if (cmd_dump->parsed()) {
        std::vector<ShapeScene> scenes = load_scenes(dump_dataset);
        HeadModel model = HeadModel::from_checkpoint(Checkpoint::load(dump_ckpt));
        const ShapeScene* scene = nullptr;
        for (const auto& s : scenes)
            if (s.ann.image_id == dump_image) scene = &s;
        if (!scene) throw LookupError("no image with id " + std::to_string(dump_image));
        fs::create_directories(dump_out);
        char name[128];
        if (!is_transformer(model.variant)) {
            const FloatGrid grid = image_to_grid(scene->image);
            const std::size_t R = model.head_cfg.roi;
            for (const auto& inst : scene->ann.instances) {
                OcclusionPair pair = derive_pair_modal(scene->ann, inst.id);
                FloatGrid crop = roi_crop(grid, pair.roi_box, int(R), int(R));
                Tensor roi = Tensor::from_data({3, R, R}, crop.v);
                auto path = [&](const char* side, const char* kind) {
                    std::snprintf(name, sizeof(name), "heatmap_%06d_%06d_%s_%s.png", dump_image,
                                  inst.id, side, kind);
                    return (fs::path(dump_out) / name).string();
                };
                if (model.head_cfg.bilayer) {
                    HeadOutput out = model.forward_roi_bilayer(roi);
                    write_gray_prob_png(path("occluder", "boundary"),
                                        out.occluder_boundary_logits);
                    write_gray_prob_png(path("occluder", "mask"), out.occluder_mask_logits);
                    write_gray_prob_png(path("occludee", "boundary"),
                                        out.occludee_boundary_logits);
                    write_gray_prob_png(path("occludee", "mask"), out.occludee_mask_logits);
                } else {
                    BranchOutput out = model.forward_roi_single(roi);
                    write_gray_prob_png(path("occludee", "boundary"), out.boundary_logits);
                    write_gray_prob_png(path("occludee", "mask"), out.mask_logits);
                }
            }
        } else {
            const FloatGrid grid = image_to_grid(scene->image);
            Tensor image = Tensor::from_data(
                {3, std::size_t(scene->image.h), std::size_t(scene->image.w)}, grid.v);
            PixelFeatures px = run_stem(image, model.tf_stem);
            DecodeOutput out = bilayer_decode(model.queries, px, model.decoder,
                                              model.variant == BenchVariant::TransformerBilayer);
            const std::size_t q = out.occludee.mask_logits.dim(0);
            const std::size_t hw = px.h() * px.w();
            for (std::size_t i = 0; i < std::min(q, dump_max_dets); ++i) {
                for (const char* side : {"occludee", "occluder"}) {
                    const Tensor& src = std::string(side) == "occludee"
                                            ? out.occludee.mask_logits
                                            : out.occluder.mask_logits;
                    std::vector<double> row(src.value().begin() + std::ptrdiff_t(i * hw),
                                            src.value().begin() + std::ptrdiff_t((i + 1) * hw));
                    Tensor t = Tensor::from_data({1, px.h(), px.w()}, std::move(row));
                    std::snprintf(name, sizeof(name), "heatmap_%06d_q%03zu_%s_mask.png",
                                  dump_image, i, side);
                    write_gray_prob_png((fs::path(dump_out) / name).string(), t);
                }
            }
        }
        std::printf("heatmaps written to %s\n", dump_out.c_str());
        return 0;
    }

    std::cout << app.help() << std::endl;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const IoError& e) {
        std::cerr << "ERROR io: " << e.what() << std::endl;
        return 2;
    } catch (const Error& e) {
        std::cerr << "ERROR " << e.code << ": " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "ERROR internal: " << e.what() << std::endl;
        return 1;
    }
}
