#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "wsigrade/core.hpp"

namespace wsigrade {

// JSON-lines manifests: one slide per line with grades, file paths and cached
// patch statistics. Paths are stored relative to the manifest's directory.
void write_slide_manifest(const std::string& path, const std::vector<SlideRecord>& slides);
std::vector<SlideRecord> read_slide_manifest(const std::string& path);

// Flat patch lists (pseudo_labels.jsonl, ssl_corpus.jsonl).
void write_patch_jsonl(const std::string& path, const std::vector<PatchRecord>& patches);
std::vector<PatchRecord> read_patch_jsonl(const std::string& path);

// Decoded-patch cache. Patch paths are resolved against `root`.
class PatchStore {
public:
    explicit PatchStore(std::string root = "") : root_(std::move(root)) {}

    // Returns the in-record pixels when present, otherwise loads (and caches)
    // the PNG behind the record.
    const Image& get(const PatchRecord& patch);

    std::string resolve(const std::string& relative_path) const;
    size_t cached_count() const { return cache_.size(); }

private:
    std::string root_;
    std::unordered_map<std::string, Image> cache_;
};

}  // namespace wsigrade
