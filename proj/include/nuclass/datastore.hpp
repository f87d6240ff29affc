// Sharded binary dataset storage, split bookkeeping, and prompt building.
//
// Shard record layout (little-endian, fixed width):
//   event_id  u64
//   flavor    u8
//   current   u8
//   class     u8
//   energy    f64 (GeV)
//   vertex    3 x f64 (m)
//   view_xz   crop_size^2 x u8, row-major
//   view_yz   crop_size^2 x u8, row-major
// Shard header: magic "NUSHARD1", crop_size u32, n_records u64.
// The manifest is written last via atomic rename; its presence implies
// complete shards.
#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nuclass/common.hpp"

namespace nuclass::datastore {

constexpr int kFormatVersion = 1;

struct DatasetManifest {
    uint64_t n_events = 0;
    std::vector<std::string> shard_paths; // relative to the manifest directory
    std::array<uint64_t, 3> composition_counts = {0, 0, 0};
    DetectorGeometry geometry;
    uint64_t base_seed = 0;
    int format_version = kFormatVersion;

    std::string to_json() const;
    static DatasetManifest from_json(const std::string& text);
};

class ShardWriter {
public:
    ShardWriter(const std::filesystem::path& out_dir, uint64_t shard_size);
    ~ShardWriter();
    ShardWriter(const ShardWriter&) = delete;
    ShardWriter& operator=(const ShardWriter&) = delete;

    void append(const PixelMapPair& pair);
    // Flushes the open shard and atomically commits the manifest.
    DatasetManifest finalize(const DetectorGeometry& geom, uint64_t base_seed);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

class DatasetReader {
public:
    explicit DatasetReader(const std::filesystem::path& manifest_path);
    ~DatasetReader();
    DatasetReader(DatasetReader&&) noexcept;

    const DatasetManifest& manifest() const;
    uint64_t size() const;
    PixelMapPair read(uint64_t index) const;
    EventTruth read_truth(uint64_t index) const; // seeks past the pixel grids

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::filesystem::path manifest_path(const std::filesystem::path& dataset_dir);

DatasetManifest write_dataset(const std::function<void(const std::function<void(PixelMapPair&&)>&)>& produce,
                              uint64_t shard_size, const std::filesystem::path& out_dir,
                              const DetectorGeometry& geom, uint64_t base_seed);

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitSpec {
    double train_fraction = 0.90;
    double val_fraction = 0.05;
    double test_fraction = 0.05;
    uint64_t split_seed = 0;

    void validate() const;
};

struct SplitIndices {
    std::vector<uint64_t> train;
    std::vector<uint64_t> val;
    std::vector<uint64_t> test;
};

// Deterministic, class-stratified partition of [0, n_events).
SplitIndices split(const DatasetReader& reader, const SplitSpec& spec);

// Order-sensitive hash of an index list; the guard evalkit uses to refuse
// predictions computed on different splits.
uint64_t split_hash(const std::vector<uint64_t>& indices);

// ---------------------------------------------------------------------------
// Prompt records
// ---------------------------------------------------------------------------

// The exact completion prefix the decoder constrains on (31 chars).
inline const std::string kCompletionPrefix = "I classify the pixel maps as ";

struct PromptConfig {
    std::string system_template;
    std::string user_template;
    int version = 1;

    static PromptConfig defaults();
    uint64_t hash() const;
};

struct PromptRecord {
    std::string system_text;
    std::string user_text;
    uint64_t event_id = 0;
    InteractionClass truth_class = InteractionClass::NC;
    std::string target_completion;
};

PromptRecord build_prompt_record(const PixelMapPair& pair, const PromptConfig& config);

} // namespace nuclass::datastore
