#include "nuclass/datastore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace nuclass::datastore {

namespace {

constexpr char kMagic[8] = {'N', 'U', 'S', 'H', 'A', 'R', 'D', '1'};
constexpr size_t kHeaderBytes = 8 + 4 + 8;
constexpr size_t kTruthBytes = 8 + 3 + 4 * 8; // event_id + enums + energy + vertex

size_t record_bytes(int crop_size) {
    return kTruthBytes + 2 * static_cast<size_t>(crop_size) * crop_size;
}

template <typename T>
void put(std::string& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T)); // little-endian host assumed, asserted below
}

template <typename T>
T get(const char*& p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    return v;
}

static_assert(std::endian::native == std::endian::little, "shard format is little-endian");

std::string encode_record(const PixelMapPair& pair) {
    std::string buf;
    buf.reserve(record_bytes(pair.size));
    put<uint64_t>(buf, pair.event_id);
    put<uint8_t>(buf, static_cast<uint8_t>(pair.truth.flavor));
    put<uint8_t>(buf, static_cast<uint8_t>(pair.truth.current));
    put<uint8_t>(buf, static_cast<uint8_t>(pair.truth.interaction));
    put<double>(buf, pair.truth.energy_gev);
    put<double>(buf, pair.truth.vertex.x);
    put<double>(buf, pair.truth.vertex.y);
    put<double>(buf, pair.truth.vertex.z);
    buf.append(reinterpret_cast<const char*>(pair.view_xz.data()), pair.view_xz.size());
    buf.append(reinterpret_cast<const char*>(pair.view_yz.data()), pair.view_yz.size());
    return buf;
}

json geometry_to_json(const DetectorGeometry& g) {
    return json{{"width_x", g.width_x},           {"height_y", g.height_y},
                {"length_z", g.length_z},         {"native_pitch", g.native_pitch},
                {"coarse_pitch", g.coarse_pitch}, {"crop_size", g.crop_size}};
}

DetectorGeometry geometry_from_json(const json& j) {
    DetectorGeometry g;
    g.width_x = j.at("width_x");
    g.height_y = j.at("height_y");
    g.length_z = j.at("length_z");
    g.native_pitch = j.at("native_pitch");
    g.coarse_pitch = j.at("coarse_pitch");
    g.crop_size = j.at("crop_size");
    return g;
}

} // namespace

std::string DatasetManifest::to_json() const {
    json j;
    j["format_version"] = format_version;
    j["n_events"] = n_events;
    j["base_seed"] = base_seed;
    j["shard_paths"] = shard_paths;
    j["composition_counts"] = {{"NUE_CC", composition_counts[0]},
                               {"NUMU_CC", composition_counts[1]},
                               {"NC", composition_counts[2]}};
    j["geometry"] = geometry_to_json(geometry);
    return j.dump(2);
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
    json j = json::parse(text);
    DatasetManifest m;
    m.format_version = j.at("format_version");
    if (m.format_version != kFormatVersion)
        throw IoError("unsupported manifest format_version " + std::to_string(m.format_version));
    m.n_events = j.at("n_events");
    m.base_seed = j.at("base_seed");
    m.shard_paths = j.at("shard_paths").get<std::vector<std::string>>();
    m.composition_counts = {j.at("composition_counts").at("NUE_CC").get<uint64_t>(),
                            j.at("composition_counts").at("NUMU_CC").get<uint64_t>(),
                            j.at("composition_counts").at("NC").get<uint64_t>()};
    m.geometry = geometry_from_json(j.at("geometry"));
    return m;
}

fs::path manifest_path(const fs::path& dataset_dir) { return dataset_dir / "manifest.json"; }

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

struct ShardWriter::Impl {
    fs::path out_dir;
    uint64_t shard_size = 0;
    std::ofstream shard;
    fs::path shard_path;
    uint64_t records_in_shard = 0;
    uint64_t total = 0;
    int crop_size = -1;
    std::array<uint64_t, 3> counts = {0, 0, 0};
    std::vector<std::string> shard_names;
    bool finalized = false;

    void open_shard() {
        char name[32];
        std::snprintf(name, sizeof(name), "shard-%05zu.bin", shard_names.size());
        shard_path = out_dir / name;
        shard.open(shard_path, std::ios::binary | std::ios::trunc);
        if (!shard) throw IoError("cannot open shard for writing: " + shard_path.string());
        // Header with a zero record count; patched on close.
        shard.write(kMagic, 8);
        uint32_t cs = static_cast<uint32_t>(crop_size);
        uint64_t zero = 0;
        shard.write(reinterpret_cast<const char*>(&cs), 4);
        shard.write(reinterpret_cast<const char*>(&zero), 8);
        shard_names.emplace_back(name);
        records_in_shard = 0;
    }

    void close_shard() {
        shard.seekp(12);
        shard.write(reinterpret_cast<const char*>(&records_in_shard), 8);
        shard.close();
        if (!shard && records_in_shard > 0)
            throw IoError("failed writing shard " + shard_path.string());
        shard.clear();
    }
};

ShardWriter::ShardWriter(const fs::path& out_dir, uint64_t shard_size) : impl_(new Impl) {
    if (shard_size == 0) throw ConfigError("shard_size must be > 0");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    impl_->out_dir = out_dir;
    impl_->shard_size = shard_size;
}

ShardWriter::~ShardWriter() {
    // Abandoned writer: no manifest was committed, partial shards are
    // ignorable garbage. Remove what we can.
    if (impl_ && !impl_->finalized) {
        if (impl_->shard.is_open()) impl_->shard.close();
        std::error_code ec;
        for (const auto& name : impl_->shard_names) fs::remove(impl_->out_dir / name, ec);
    }
}

void ShardWriter::append(const PixelMapPair& pair) {
    auto& im = *impl_;
    if (im.crop_size < 0) im.crop_size = pair.size;
    if (pair.size != im.crop_size)
        throw InvalidInputError("mixed crop sizes within one dataset");
    if (pair.view_xz.size() != static_cast<size_t>(pair.size) * pair.size ||
        pair.view_yz.size() != static_cast<size_t>(pair.size) * pair.size)
        throw InvalidInputError("pixel grid size does not match crop_size");
    if (!im.shard.is_open()) im.open_shard();
    std::string rec = encode_record(pair);
    im.shard.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    if (!im.shard) throw IoError("write failed on shard " + im.shard_path.string());
    im.counts[static_cast<int>(pair.truth.interaction)]++;
    if (++im.records_in_shard == im.shard_size) im.close_shard();
    ++im.total;
}

DatasetManifest ShardWriter::finalize(const DetectorGeometry& geom, uint64_t base_seed) {
    auto& im = *impl_;
    if (im.shard.is_open()) im.close_shard();
    DatasetManifest m;
    m.n_events = im.total;
    m.shard_paths = im.shard_names;
    m.composition_counts = im.counts;
    m.geometry = geom;
    m.base_seed = base_seed;

    fs::path final_path = manifest_path(im.out_dir);
    fs::path tmp_path = final_path;
    tmp_path += ".tmp";
    {
        std::ofstream out(tmp_path, std::ios::trunc);
        if (!out) throw IoError("cannot write manifest: " + tmp_path.string());
        out << m.to_json() << "\n";
    }
    fs::rename(tmp_path, final_path); // atomic commit point
    im.finalized = true;
    return m;
}

DatasetManifest write_dataset(
    const std::function<void(const std::function<void(PixelMapPair&&)>&)>& produce,
    uint64_t shard_size, const fs::path& out_dir, const DetectorGeometry& geom,
    uint64_t base_seed) {
    ShardWriter writer(out_dir, shard_size);
    produce([&](PixelMapPair&& pair) { writer.append(pair); });
    return writer.finalize(geom, base_seed);
}

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

struct DatasetReader::Impl {
    DatasetManifest manifest;
    fs::path dir;
    struct Shard {
        fs::path path;
        uint64_t n_records = 0;
    };
    std::vector<Shard> shards;
    std::vector<uint64_t> shard_start; // cumulative first index
    int crop_size = 0;

    std::pair<size_t, uint64_t> locate(uint64_t index) const {
        auto it = std::upper_bound(shard_start.begin(), shard_start.end(), index);
        size_t s = static_cast<size_t>(it - shard_start.begin()) - 1;
        return {s, index - shard_start[s]};
    }
};

DatasetReader::DatasetReader(const fs::path& manifest_file) : impl_(new Impl) {
    std::ifstream in(manifest_file);
    if (!in) throw IoError("cannot open manifest: " + manifest_file.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    impl_->manifest = DatasetManifest::from_json(text);
    impl_->dir = manifest_file.parent_path();
    impl_->crop_size = impl_->manifest.geometry.crop_size;

    uint64_t running = 0;
    for (const auto& name : impl_->manifest.shard_paths) {
        fs::path p = impl_->dir / name;
        std::ifstream shard(p, std::ios::binary);
        char magic[8];
        uint32_t cs = 0;
        uint64_t n = 0;
        shard.read(magic, 8);
        shard.read(reinterpret_cast<char*>(&cs), 4);
        shard.read(reinterpret_cast<char*>(&n), 8);
        if (!shard || std::memcmp(magic, kMagic, 8) != 0)
            throw IoError("bad shard header: " + p.string());
        if (static_cast<int>(cs) != impl_->crop_size)
            throw IoError("shard crop_size disagrees with manifest: " + p.string());
        impl_->shard_start.push_back(running);
        impl_->shards.push_back({p, n});
        running += n;
    }
    if (running != impl_->manifest.n_events)
        throw IoError("shard record counts do not sum to manifest n_events");
}

DatasetReader::~DatasetReader() = default;
DatasetReader::DatasetReader(DatasetReader&&) noexcept = default;

const DatasetManifest& DatasetReader::manifest() const { return impl_->manifest; }
uint64_t DatasetReader::size() const { return impl_->manifest.n_events; }

PixelMapPair DatasetReader::read(uint64_t index) const {
    if (index >= size()) throw InvalidInputError("dataset index out of range");
    auto [s, local] = impl_->locate(index);
    const auto& shard = impl_->shards[s];
    size_t rec = record_bytes(impl_->crop_size);
    std::ifstream in(shard.path, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(kHeaderBytes + local * rec));
    std::vector<char> buf(rec);
    in.read(buf.data(), static_cast<std::streamsize>(rec));
    if (!in) throw IoError("short read from shard " + shard.path.string());

    const char* p = buf.data();
    PixelMapPair pair;
    pair.size = impl_->crop_size;
    pair.event_id = get<uint64_t>(p);
    pair.truth.flavor = static_cast<Flavor>(get<uint8_t>(p));
    pair.truth.current = static_cast<Current>(get<uint8_t>(p));
    pair.truth.interaction = static_cast<InteractionClass>(get<uint8_t>(p));
    pair.truth.energy_gev = get<double>(p);
    pair.truth.vertex.x = get<double>(p);
    pair.truth.vertex.y = get<double>(p);
    pair.truth.vertex.z = get<double>(p);
    size_t grid = static_cast<size_t>(pair.size) * pair.size;
    pair.view_xz.assign(reinterpret_cast<const uint8_t*>(p), reinterpret_cast<const uint8_t*>(p) + grid);
    p += grid;
    pair.view_yz.assign(reinterpret_cast<const uint8_t*>(p), reinterpret_cast<const uint8_t*>(p) + grid);
    return pair;
}

EventTruth DatasetReader::read_truth(uint64_t index) const {
    if (index >= size()) throw InvalidInputError("dataset index out of range");
    auto [s, local] = impl_->locate(index);
    const auto& shard = impl_->shards[s];
    size_t rec = record_bytes(impl_->crop_size);
    std::ifstream in(shard.path, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(kHeaderBytes + local * rec));
    char buf[kTruthBytes];
    in.read(buf, kTruthBytes);
    if (!in) throw IoError("short read from shard " + shard.path.string());
    const char* p = buf;
    get<uint64_t>(p); // event_id
    EventTruth t;
    t.flavor = static_cast<Flavor>(get<uint8_t>(p));
    t.current = static_cast<Current>(get<uint8_t>(p));
    t.interaction = static_cast<InteractionClass>(get<uint8_t>(p));
    t.energy_gev = get<double>(p);
    t.vertex.x = get<double>(p);
    t.vertex.y = get<double>(p);
    t.vertex.z = get<double>(p);
    return t;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

void SplitSpec::validate() const {
    if (train_fraction < 0 || val_fraction < 0 || test_fraction < 0)
        throw ConfigError("split fractions must be nonnegative");
    if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
        throw ConfigError("split fractions must sum to 1");
}

SplitIndices split(const DatasetReader& reader, const SplitSpec& spec) {
    spec.validate();
    std::array<std::vector<uint64_t>, 3> by_class;
    for (uint64_t i = 0; i < reader.size(); ++i)
        by_class[static_cast<int>(reader.read_truth(i).interaction)].push_back(i);

    SplitIndices out;
    for (int c = 0; c < kNumClasses; ++c) {
        auto& idx = by_class[c];
        std::mt19937_64 rng(splitmix64(spec.split_seed * 131 + c));
        std::shuffle(idx.begin(), idx.end(), rng);
        auto n = static_cast<uint64_t>(idx.size());
        auto n_test = static_cast<uint64_t>(std::llround(spec.test_fraction * static_cast<double>(n)));
        auto n_val = static_cast<uint64_t>(std::llround(spec.val_fraction * static_cast<double>(n)));
        n_test = std::min(n_test, n);
        n_val = std::min(n_val, n - n_test);
        out.test.insert(out.test.end(), idx.begin(), idx.begin() + n_test);
        out.val.insert(out.val.end(), idx.begin() + n_test, idx.begin() + n_test + n_val);
        out.train.insert(out.train.end(), idx.begin() + n_test + n_val, idx.end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

uint64_t split_hash(const std::vector<uint64_t>& indices) {
    uint64_t h = fnv1a(&kFormatVersion, sizeof(kFormatVersion));
    for (uint64_t i : indices) h = fnv1a(&i, sizeof(i), h);
    return h;
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

PromptConfig PromptConfig::defaults() {
    PromptConfig c;
    c.system_template =
        "You are an expert particle physicist analyzing liquid argon time projection "
        "chamber data. Each event is shown as two 512x512 grayscale pixel maps (XZ and "
        "YZ views) of charge deposited by a neutrino interaction. Interaction classes: "
        "{label_0} (a dense conical electromagnetic shower from the outgoing electron), "
        "{label_1} (a long thin minimum-ionizing muon track with hadronic activity at "
        "the vertex), {label_2} (compact hadronic activity only, no charged lepton).";
    c.user_template =
        "Classify the interaction shown in the two pixel maps as one of: {label_0}, "
        "{label_1}, or {label_2}.";
    return c;
}

uint64_t PromptConfig::hash() const {
    uint64_t h = fnv1a(system_template.data(), system_template.size());
    h = fnv1a(user_template.data(), user_template.size(), h);
    h = fnv1a(&version, sizeof(version), h);
    return h;
}

namespace {

std::string render_template(std::string text) {
    const auto& labels = class_labels();
    for (int i = 0; i < kNumClasses; ++i) {
        std::string key = "{label_" + std::to_string(i) + "}";
        size_t pos;
        while ((pos = text.find(key)) != std::string::npos) text.replace(pos, key.size(), labels[i]);
    }
    if (text.find('{') != std::string::npos)
        throw ConfigError("prompt template contains an unknown placeholder: " + text);
    return text;
}

} // namespace

PromptRecord build_prompt_record(const PixelMapPair& pair, const PromptConfig& config) {
    if (pair.truth.interaction != interaction_class(pair.truth.flavor, pair.truth.current))
        throw InvalidInputError("prompt record truth has inconsistent interaction class");
    PromptRecord rec;
    rec.system_text = render_template(config.system_template);
    rec.user_text = render_template(config.user_template);
    rec.event_id = pair.event_id;
    rec.truth_class = pair.truth.interaction;
    rec.target_completion =
        kCompletionPrefix + class_labels()[static_cast<int>(pair.truth.interaction)];
    return rec;
}

} // namespace nuclass::datastore
