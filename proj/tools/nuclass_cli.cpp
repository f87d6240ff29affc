// nuclass: dataset generation, training, inference, evaluation and
// reporting for the dual-view neutrino event classification pipeline.
//
// Exit codes: 0 success, 2 usage/config error, 3 data or hash mismatch,
// 4 runtime failure.
#include <CLI11.hpp>
#include <json.hpp>

#include <malloc.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "nuclass/cnn.hpp"
#include "nuclass/common.hpp"
#include "nuclass/datastore.hpp"
#include "nuclass/decode.hpp"
#include "nuclass/evalkit.hpp"
#include "nuclass/eventgen.hpp"
#include "nuclass/vlm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nuclass;

namespace {

constexpr int kConfigSchemaVersion = 1;

struct RunConfig {
    DetectorGeometry geometry;
    eventgen::CompositionSpec composition;
    datastore::SplitSpec split;
    cnn::CNNConfig cnn_config = cnn::CNNConfig::defaults();
    cnn::TrainRecipe cnn_recipe;
    vlm::TinyVLMConfig vlm_backbone;
    vlm::AdapterConfig vlm_adapter = vlm::AdapterConfig::defaults();
    vlm::SFTRecipe vlm_recipe;
    datastore::PromptConfig prompt = datastore::PromptConfig::defaults();
    double decode_temperature = decode::kDefaultTemperature;
    uint64_t dataset_seed = 7;
    uint64_t shuffle_seed = 17;
    uint64_t shard_size = 1024;
};

json geometry_json(const DetectorGeometry& g) {
    return {{"width_x", g.width_x},       {"height_y", g.height_y},
            {"length_z", g.length_z},     {"native_pitch", g.native_pitch},
            {"coarse_pitch", g.coarse_pitch}, {"crop_size", g.crop_size}};
}

void geometry_from(const json& j, DetectorGeometry& g) {
    g.width_x = j.value("width_x", g.width_x);
    g.height_y = j.value("height_y", g.height_y);
    g.length_z = j.value("length_z", g.length_z);
    g.native_pitch = j.value("native_pitch", g.native_pitch);
    g.coarse_pitch = j.value("coarse_pitch", g.coarse_pitch);
    g.crop_size = j.value("crop_size", g.crop_size);
}

json run_config_json(const RunConfig& c) {
    return {{"schema_version", kConfigSchemaVersion},
            {"geometry", geometry_json(c.geometry)},
            {"composition",
             {{"frac_nue_cc", c.composition.frac_nue_cc},
              {"frac_numu_cc", c.composition.frac_numu_cc},
              {"frac_nc", c.composition.frac_nc}}},
            {"split",
             {{"train_fraction", c.split.train_fraction},
              {"val_fraction", c.split.val_fraction},
              {"test_fraction", c.split.test_fraction},
              {"split_seed", c.split.split_seed}}},
            {"cnn",
             {{"config", json::parse(c.cnn_config.to_json())},
              {"recipe", json::parse(c.cnn_recipe.to_json())}}},
            {"vlm",
             {{"backbone",
               {{"d_model", c.vlm_backbone.d_model},
                {"n_layers", c.vlm_backbone.n_layers},
                {"vocab_size", c.vlm_backbone.vocab_size},
                {"max_seq", c.vlm_backbone.max_seq},
                {"ffn_mult", c.vlm_backbone.ffn_mult},
                {"patch_grid", c.vlm_backbone.patch_grid},
                {"init_seed", c.vlm_backbone.init_seed}}},
              {"adapter", json::parse(c.vlm_adapter.to_json())},
              {"recipe", json::parse(c.vlm_recipe.to_json())}}},
            {"prompt",
             {{"system_template", c.prompt.system_template},
              {"user_template", c.prompt.user_template},
              {"version", c.prompt.version}}},
            {"decode", {{"temperature", c.decode_temperature}}},
            {"seeds",
             {{"dataset", c.dataset_seed},
              {"shuffle", c.shuffle_seed},
              {"shard_size", c.shard_size}}}};
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    int schema = j.value("schema_version", kConfigSchemaVersion);
    if (schema != kConfigSchemaVersion)
        throw ConfigError("unsupported config schema version " + std::to_string(schema));
    if (j.contains("geometry")) geometry_from(j["geometry"], c.geometry);
    if (j.contains("composition")) {
        const auto& cj = j["composition"];
        c.composition.frac_nue_cc = cj.value("frac_nue_cc", c.composition.frac_nue_cc);
        c.composition.frac_numu_cc = cj.value("frac_numu_cc", c.composition.frac_numu_cc);
        c.composition.frac_nc = cj.value("frac_nc", c.composition.frac_nc);
    }
    if (j.contains("split")) {
        const auto& sj = j["split"];
        c.split.train_fraction = sj.value("train_fraction", c.split.train_fraction);
        c.split.val_fraction = sj.value("val_fraction", c.split.val_fraction);
        c.split.test_fraction = sj.value("test_fraction", c.split.test_fraction);
        c.split.split_seed = sj.value("split_seed", c.split.split_seed);
    }
    if (j.contains("cnn")) {
        const auto& nj = j["cnn"];
        if (nj.contains("config")) c.cnn_config = cnn::CNNConfig::from_json(nj["config"].dump());
        if (nj.contains("recipe")) c.cnn_recipe = cnn::TrainRecipe::from_json(nj["recipe"].dump());
    }
    if (j.contains("vlm")) {
        const auto& vj = j["vlm"];
        if (vj.contains("backbone")) {
            const auto& bj = vj["backbone"];
            c.vlm_backbone.d_model = bj.value("d_model", c.vlm_backbone.d_model);
            c.vlm_backbone.n_layers = bj.value("n_layers", c.vlm_backbone.n_layers);
            c.vlm_backbone.vocab_size = bj.value("vocab_size", c.vlm_backbone.vocab_size);
            c.vlm_backbone.max_seq = bj.value("max_seq", c.vlm_backbone.max_seq);
            c.vlm_backbone.ffn_mult = bj.value("ffn_mult", c.vlm_backbone.ffn_mult);
            c.vlm_backbone.patch_grid = bj.value("patch_grid", c.vlm_backbone.patch_grid);
            c.vlm_backbone.init_seed = bj.value("init_seed", c.vlm_backbone.init_seed);
        }
        if (vj.contains("adapter"))
            c.vlm_adapter = vlm::AdapterConfig::from_json(vj["adapter"].dump());
        if (vj.contains("recipe"))
            c.vlm_recipe = vlm::SFTRecipe::from_json(vj["recipe"].dump());
    }
    if (j.contains("prompt")) {
        const auto& pj = j["prompt"];
        c.prompt.system_template = pj.value("system_template", c.prompt.system_template);
        c.prompt.user_template = pj.value("user_template", c.prompt.user_template);
        c.prompt.version = pj.value("version", c.prompt.version);
    }
    if (j.contains("decode"))
        c.decode_temperature = j["decode"].value("temperature", c.decode_temperature);
    if (j.contains("seeds")) {
        const auto& sj = j["seeds"];
        c.dataset_seed = sj.value("dataset", c.dataset_seed);
        c.shuffle_seed = sj.value("shuffle", c.shuffle_seed);
        c.shard_size = sj.value("shard_size", c.shard_size);
    }
    return c;
}

RunConfig load_config(const std::string& config_path) {
    if (config_path.empty()) return RunConfig{};
    std::ifstream in(config_path);
    if (!in) throw IoError("cannot read config " + config_path);
    return run_config_from_json(json::parse(in));
}

// Every command drops the exact resolved config it ran with into its out dir.
void snapshot_config(const RunConfig& c, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    fs::path tmp = out_dir / "run_config.json.tmp";
    {
        std::ofstream out(tmp);
        out << run_config_json(c).dump(2) << "\n";
        if (!out) throw IoError("cannot write " + tmp.string());
    }
    fs::rename(tmp, out_dir / "run_config.json");
}

// --- splits file -----------------------------------------------------------

struct SplitsFile {
    datastore::SplitIndices indices;
    uint64_t train_hash = 0, val_hash = 0, test_hash = 0;
};

void write_splits(const fs::path& path, const datastore::SplitIndices& idx,
                  const datastore::SplitSpec& spec) {
    json j = {{"spec",
               {{"train_fraction", spec.train_fraction},
                {"val_fraction", spec.val_fraction},
                {"test_fraction", spec.test_fraction},
                {"split_seed", spec.split_seed}}},
              {"train", idx.train},
              {"val", idx.val},
              {"test", idx.test},
              {"train_hash", datastore::split_hash(idx.train)},
              {"val_hash", datastore::split_hash(idx.val)},
              {"test_hash", datastore::split_hash(idx.test)}};
    fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        out << j.dump() << "\n";
        if (!out) throw IoError("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

SplitsFile read_splits(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read splits file " + path.string());
    json j = json::parse(in);
    SplitsFile s;
    s.indices.train = j.at("train").get<std::vector<uint64_t>>();
    s.indices.val = j.at("val").get<std::vector<uint64_t>>();
    s.indices.test = j.at("test").get<std::vector<uint64_t>>();
    s.train_hash = j.at("train_hash").get<uint64_t>();
    s.val_hash = j.at("val_hash").get<uint64_t>();
    s.test_hash = j.at("test_hash").get<uint64_t>();
    if (datastore::split_hash(s.indices.train) != s.train_hash ||
        datastore::split_hash(s.indices.val) != s.val_hash ||
        datastore::split_hash(s.indices.test) != s.test_hash)
        throw DataMismatchError("splits file " + path.string() + " fails its own hash check");
    return s;
}

// --- commands ---------------------------------------------------------------

int cmd_gen(const RunConfig& cfg, uint64_t n, const fs::path& out_dir) {
    cfg.geometry.validate();
    cfg.composition.validate();
    snapshot_config(cfg, out_dir);
    auto produce = [&](const std::function<void(PixelMapPair&&)>& sink) {
        eventgen::generate_dataset(n, cfg.geometry, cfg.composition, cfg.dataset_seed, sink);
    };
    datastore::DatasetManifest m = datastore::write_dataset(
        produce, cfg.shard_size, out_dir, cfg.geometry, cfg.dataset_seed);
    std::cout << "generated " << m.n_events << " events into " << m.shard_paths.size()
              << " shard(s) at " << out_dir.string() << "\n"
              << "composition: nue_cc=" << m.composition_counts[0]
              << " numu_cc=" << m.composition_counts[1] << " nc=" << m.composition_counts[2]
              << "\n";
    return 0;
}

int cmd_split(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir) {
    datastore::DatasetReader reader(datastore::manifest_path(data_dir));
    datastore::SplitIndices idx = datastore::split(reader, cfg.split);
    snapshot_config(cfg, out_dir);
    write_splits(out_dir / "splits.json", idx, cfg.split);
    std::cout << "split " << reader.size() << " events: train=" << idx.train.size()
              << " val=" << idx.val.size() << " test=" << idx.test.size()
              << " (test hash " << datastore::split_hash(idx.test) << ")\n";
    return 0;
}

cnn::BatchLoader make_loader(const datastore::DatasetReader& reader) {
    return [&reader](const std::vector<uint64_t>& indices, nn::Tensor& view_xz,
                     nn::Tensor& view_yz, std::vector<int>& labels) {
        int n = static_cast<int>(indices.size());
        int size = reader.manifest().geometry.crop_size;
        view_xz = nn::Tensor(1, size, size, n);
        view_yz = nn::Tensor(1, size, size, n);
        labels.resize(indices.size());
        for (int i = 0; i < n; ++i) {
            PixelMapPair pair = reader.read(indices[static_cast<size_t>(i)]);
            cnn::fill_view_tensor(view_xz, i, pair.view_xz, size);
            cnn::fill_view_tensor(view_yz, i, pair.view_yz, size);
            labels[static_cast<size_t>(i)] = static_cast<int>(pair.truth.interaction);
        }
    };
}

int cmd_train_cnn(const RunConfig& cfg, const fs::path& data_dir, const fs::path& splits_path,
                  const fs::path& out_dir) {
    datastore::DatasetReader reader(datastore::manifest_path(data_dir));
    SplitsFile splits = read_splits(splits_path);
    snapshot_config(cfg, out_dir);

    cnn::SiameseCNN model(cfg.cnn_config);
    std::cout << "training CNN (" << model.parameter_count() << " parameters) on "
              << splits.indices.train.size() << " events\n";
    cnn::TrainOptions opts;
    opts.shuffle_seed = cfg.shuffle_seed;
    opts.checkpoint_path = out_dir / "cnn_checkpoint.bin";
    opts.log_path = out_dir / "train_log.jsonl";
    opts.on_epoch = [](const cnn::EpochLog& e) {
        std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss "
                  << e.val_loss << " val_acc " << e.val_accuracy << "\n";
        return true;
    };
    cnn::TrainResult res = cnn::train(model, make_loader(reader), splits.indices.train,
                                      splits.indices.val, cfg.cnn_recipe, opts);
    std::cout << "best epoch " << res.best_epoch << " val_loss " << res.best_val_loss
              << (res.early_stopped ? " (early stop)" : "") << "\n";
    return 0;
}

std::vector<vlm::SFTExample> load_sft_examples(const datastore::DatasetReader& reader,
                                               const std::vector<uint64_t>& indices,
                                               const datastore::PromptConfig& prompt,
                                               uint64_t limit) {
    std::vector<vlm::SFTExample> out;
    uint64_t n = limit > 0 ? std::min<uint64_t>(limit, indices.size()) : indices.size();
    out.reserve(n);
    for (uint64_t i = 0; i < n; ++i) {
        vlm::SFTExample ex;
        ex.pair = reader.read(indices[i]);
        ex.record = datastore::build_prompt_record(ex.pair, prompt);
        out.push_back(std::move(ex));
    }
    return out;
}

int cmd_finetune_vlm(const RunConfig& cfg, const fs::path& data_dir, const fs::path& splits_path,
                     const fs::path& out_dir, uint64_t limit) {
    datastore::DatasetReader reader(datastore::manifest_path(data_dir));
    SplitsFile splits = read_splits(splits_path);
    snapshot_config(cfg, out_dir);

    vlm::TinyVLM model(cfg.vlm_backbone);
    model.attach_adapters(cfg.vlm_adapter);
    std::cout << "fine-tuning adapters: " << model.trainable_parameter_count() << " / "
              << model.total_parameter_count() << " parameters trainable\n";

    auto examples = load_sft_examples(reader, splits.indices.train, cfg.prompt, limit);
    vlm::FinetuneOptions opts;
    opts.checkpoint_path = (out_dir / "adapters.bin").string();
    opts.loss_log_path = (out_dir / "sft_log.jsonl").string();
    opts.prompt_template_hash = cfg.prompt.hash();
    opts.shuffle_seed = cfg.shuffle_seed;
    vlm::FinetuneResult res = vlm::finetune(model, examples, cfg.vlm_recipe, opts);
    std::cout << "sft steps " << res.steps.size() << " smoothed loss "
              << res.initial_smoothed_loss << " -> " << res.final_smoothed_loss << "\n";
    return 0;
}

int cmd_infer(const RunConfig& cfg, const fs::path& data_dir, const fs::path& splits_path,
              const std::string& model_kind, const fs::path& checkpoint,
              const fs::path& out_file) {
    datastore::DatasetReader reader(datastore::manifest_path(data_dir));
    SplitsFile splits = read_splits(splits_path);
    uint64_t test_hash = datastore::split_hash(splits.indices.test);

    std::vector<evalkit::LabeledPrediction> preds;
    preds.reserve(splits.indices.test.size());
    auto record = [&](const PixelMapPair& pair, const Prediction& p) {
        evalkit::LabeledPrediction lp;
        lp.event_id = pair.event_id;
        lp.truth = pair.truth.interaction;
        lp.predicted = p.predicted;
        lp.confidences = p.confidences;
        lp.latency_ms = p.latency_ms;
        preds.push_back(lp);
    };

    if (model_kind == "cnn") {
        cnn::Checkpoint ckpt = cnn::load_checkpoint(checkpoint);
        for (uint64_t idx : splits.indices.test) {
            PixelMapPair pair = reader.read(idx);
            record(pair, ckpt.model->predict(pair));
        }
    } else {
        vlm::TinyVLM model(cfg.vlm_backbone);
        model.load_adapters(checkpoint.string(), cfg.prompt.hash());
        for (uint64_t idx : splits.indices.test) {
            PixelMapPair pair = reader.read(idx);
            record(pair, vlm::classify(model, pair, cfg.prompt, cfg.decode_temperature));
        }
    }
    evalkit::write_predictions(out_file, model_kind, test_hash, preds);
    std::cout << "wrote " << preds.size() << " predictions to " << out_file.string() << "\n";
    return 0;
}

int cmd_eval(const fs::path& pred_a, const fs::path& pred_b, const fs::path& out_dir) {
    evalkit::PredictionsFile a = evalkit::read_predictions(pred_a);
    evalkit::PredictionsFile b =
        pred_b.empty() ? a : evalkit::read_predictions(pred_b);
    if (a.split_hash != b.split_hash)
        throw DataMismatchError("predictions were computed on different splits: " +
                                pred_a.string() + " vs " + pred_b.string());
    evalkit::MetricsReport ra = evalkit::compute_report(a.preds, a.model_tag, a.split_hash);
    evalkit::MetricsReport rb = evalkit::compute_report(b.preds, b.model_tag, b.split_hash);
    auto files = evalkit::render_report(ra, rb, out_dir);
    std::cout << "report: " << files.size() << " artifact(s) in " << out_dir.string() << "\n";
    std::cout << a.model_tag << " accuracy " << ra.aggregate.accuracy << " macro AUC "
              << ra.macro_auc << "\n";
    if (!pred_b.empty())
        std::cout << b.model_tag << " accuracy " << rb.aggregate.accuracy << " macro AUC "
                  << rb.macro_auc << "\n";
    return 0;
}

int cmd_report(const fs::path& metrics_a, const fs::path& metrics_b, const fs::path& out_dir) {
    auto load = [](const fs::path& p) {
        std::ifstream in(p);
        if (!in) throw IoError("cannot read metrics " + p.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return evalkit::MetricsReport::from_json(ss.str());
    };
    auto files = evalkit::render_report(load(metrics_a), load(metrics_b), out_dir);
    std::cout << "report: " << files.size() << " artifact(s) in " << out_dir.string() << "\n";
    return 0;
}

int cmd_bench(const RunConfig& cfg, const fs::path& data_dir, const std::string& model_kind,
              const fs::path& checkpoint, uint64_t n) {
    datastore::DatasetReader reader(datastore::manifest_path(data_dir));
    uint64_t count = std::min<uint64_t>(n, reader.size());
    std::vector<PixelMapPair> samples;
    for (uint64_t i = 0; i < count; ++i) samples.push_back(reader.read(i));

    std::function<void(const PixelMapPair&)> classify;
    cnn::Checkpoint ckpt;
    std::unique_ptr<vlm::TinyVLM> vmodel;
    if (model_kind == "cnn") {
        ckpt = cnn::load_checkpoint(checkpoint);
        classify = [&](const PixelMapPair& p) { ckpt.model->predict(p); };
    } else {
        vmodel = std::make_unique<vlm::TinyVLM>(cfg.vlm_backbone);
        if (!checkpoint.empty()) vmodel->load_adapters(checkpoint.string(), cfg.prompt.hash());
        classify = [&](const PixelMapPair& p) {
            vlm::classify(*vmodel, p, cfg.prompt, cfg.decode_temperature);
        };
    }
    int warmup = samples.size() > 4 ? 2 : 0;
    evalkit::ResourceProfile prof = evalkit::resource_profile(
        classify, samples, warmup, static_cast<int>(samples.size()) - warmup);
    std::cout << "model " << model_kind << ": " << prof.ms_per_sample << " ms/sample, "
              << prof.memory_mb << " MB peak resident\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    // Large activation buffers churn every layer; keep them on the heap
    // instead of mmap/munmap round trips.
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, -1);

    CLI::App app{"neutrino event classification pipeline"};
    app.require_subcommand(1);

    std::string config_path, model_kind = "cnn";
    uint64_t n = 0, seed = 0;
    bool seed_set = false;
    std::string out_dir = "run";
    std::string data_dir, splits_path, checkpoint, pred_a, pred_b, metrics_a, metrics_b,
        out_file;

    app.add_option("--config", config_path, "run config JSON")->check(CLI::ExistingFile);

    auto* gen = app.add_subcommand("gen", "generate a sharded dataset");
    gen->add_option("--n", n, "number of events")->required();
    gen->add_option("--seed", seed)->each([&](const std::string&) { seed_set = true; });
    gen->add_option("--out", out_dir);

    auto* split_cmd = app.add_subcommand("split", "stratified train/val/test split");
    split_cmd->add_option("--data", data_dir)->required();
    split_cmd->add_option("--seed", seed)->each([&](const std::string&) { seed_set = true; });
    split_cmd->add_option("--out", out_dir);

    auto* train = app.add_subcommand("train-cnn", "train the Siamese CNN baseline");
    train->add_option("--data", data_dir)->required();
    train->add_option("--splits", splits_path)->required();
    train->add_option("--out", out_dir);

    auto* ft = app.add_subcommand("finetune-vlm", "fine-tune adapters on prompt records");
    ft->add_option("--data", data_dir)->required();
    ft->add_option("--splits", splits_path)->required();
    ft->add_option("--out", out_dir);
    ft->add_option("--n", n, "cap on training records (0 = all)");

    auto* infer = app.add_subcommand("infer", "write test-split predictions");
    infer->add_option("--data", data_dir)->required();
    infer->add_option("--splits", splits_path)->required();
    infer->add_option("--model", model_kind)->check(CLI::IsMember({"cnn", "vlm"}));
    infer->add_option("--checkpoint", checkpoint)->required();
    infer->add_option("--out", out_file)->required();

    auto* eval = app.add_subcommand("eval", "evaluate predictions and render the report");
    eval->add_option("--pred-a", pred_a)->required();
    eval->add_option("--pred-b", pred_b);
    eval->add_option("--out", out_dir);

    auto* report = app.add_subcommand("report", "render a report from saved metrics");
    report->add_option("--metrics-a", metrics_a)->required();
    report->add_option("--metrics-b", metrics_b)->required();
    report->add_option("--out", out_dir);

    auto* bench = app.add_subcommand("bench", "profile inference memory and latency");
    bench->add_option("--data", data_dir)->required();
    bench->add_option("--model", model_kind)->check(CLI::IsMember({"cnn", "vlm"}));
    bench->add_option("--checkpoint", checkpoint);
    bench->add_option("--n", n, "number of samples");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = load_config(config_path);
        if (gen->parsed()) {
            if (n == 0) throw ConfigError("gen requires --n > 0");
            if (seed_set) cfg.dataset_seed = seed;
            return cmd_gen(cfg, n, out_dir);
        }
        if (split_cmd->parsed()) {
            if (seed_set) cfg.split.split_seed = seed;
            return cmd_split(cfg, data_dir, out_dir);
        }
        if (train->parsed()) return cmd_train_cnn(cfg, data_dir, splits_path, out_dir);
        if (ft->parsed()) return cmd_finetune_vlm(cfg, data_dir, splits_path, out_dir, n);
        if (infer->parsed())
            return cmd_infer(cfg, data_dir, splits_path, model_kind, checkpoint, out_file);
        if (eval->parsed()) return cmd_eval(pred_a, pred_b, out_dir);
        if (report->parsed()) return cmd_report(metrics_a, metrics_b, out_dir);
        if (bench->parsed())
            return cmd_bench(cfg, data_dir, model_kind, checkpoint, n == 0 ? 16 : n);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const InvalidInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataMismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}
