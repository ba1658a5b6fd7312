#include "wsigrade/manifest.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace wsigrade {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json patch_to_json(const PatchRecord& p) {
    json j{{"path", p.path},
           {"index", p.index},
           {"tissue_fraction", p.tissue_fraction},
           {"mean_intensity", p.mean_intensity}};
    if (!p.slide_id.empty()) j["slide_id"] = p.slide_id;
    if (p.pseudo_label) j["pseudo_label"] = to_int(*p.pseudo_label);
    if (p.pseudo_confidence) j["pseudo_confidence"] = *p.pseudo_confidence;
    return j;
}

PatchRecord patch_from_json(const json& j, const std::string& slide_id = "") {
    PatchRecord p;
    p.slide_id = j.value("slide_id", slide_id);
    p.path = j.value("path", "");
    p.index = j.value("index", 0);
    p.tissue_fraction = j.value("tissue_fraction", 0.0);
    p.mean_intensity = j.value("mean_intensity", 0.0);
    if (j.contains("pseudo_label")) p.pseudo_label = gleason_from_int(j.at("pseudo_label"));
    if (j.contains("pseudo_confidence")) p.pseudo_confidence = j.at("pseudo_confidence").get<double>();
    return p;
}

}  // namespace

void write_slide_manifest(const std::string& path, const std::vector<SlideRecord>& slides) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    for (const auto& slide : slides) {
        json j{{"slide_id", slide.slide_id},
               {"primary_gg", to_int(slide.primary_gg)},
               {"secondary_gg", to_int(slide.secondary_gg)},
               {"isup", slide.isup}};
        if (!slide.split.empty()) j["split"] = slide.split;
        if (!slide.image_path.empty()) j["image"] = slide.image_path;
        if (!slide.mask_paths.empty()) {
            json masks = json::object();
            for (const auto& [gg, mask_path] : slide.mask_paths)
                masks[std::to_string(gg)] = mask_path;
            j["masks"] = masks;
        }
        if (!slide.patches.empty()) {
            json patches = json::array();
            for (const auto& p : slide.patches) patches.push_back(patch_to_json(p));
            j["patches"] = patches;
        }
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("failed writing manifest: " + path);
}

std::vector<SlideRecord> read_slide_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read manifest: " + path);
    std::vector<SlideRecord> slides;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError(path + ":" + std::to_string(line_no) + ": bad JSON: " + e.what());
        }
        SlideRecord slide;
        slide.slide_id = j.at("slide_id");
        slide.primary_gg = gleason_from_int(j.at("primary_gg"));
        slide.secondary_gg = gleason_from_int(j.at("secondary_gg"));
        slide.isup = validate_isup(j.at("isup"));
        slide.split = j.value("split", "");
        slide.image_path = j.value("image", "");
        if (j.contains("masks"))
            for (const auto& [key, value] : j.at("masks").items())
                slide.mask_paths[std::stoi(key)] = value.get<std::string>();
        if (j.contains("patches"))
            for (const auto& pj : j.at("patches"))
                slide.patches.push_back(patch_from_json(pj, slide.slide_id));
        validate_slide(slide);
        slides.push_back(std::move(slide));
    }
    return slides;
}

void write_patch_jsonl(const std::string& path, const std::vector<PatchRecord>& patches) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write patch list: " + path);
    for (const auto& p : patches) out << patch_to_json(p).dump() << "\n";
    if (!out) throw IoError("failed writing patch list: " + path);
}

std::vector<PatchRecord> read_patch_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read patch list: " + path);
    std::vector<PatchRecord> patches;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        patches.push_back(patch_from_json(json::parse(line)));
    }
    return patches;
}

const Image& PatchStore::get(const PatchRecord& patch) {
    if (!patch.pixels.empty()) return patch.pixels;
    if (patch.path.empty())
        throw IoError("patch " + patch.slide_id + "#" + std::to_string(patch.index) +
                      " has neither pixels nor a path");
    auto it = cache_.find(patch.path);
    if (it == cache_.end())
        it = cache_.emplace(patch.path, load_image(resolve(patch.path))).first;
    return it->second;
}

std::string PatchStore::resolve(const std::string& relative_path) const {
    if (root_.empty() || fs::path(relative_path).is_absolute()) return relative_path;
    return (fs::path(root_) / relative_path).string();
}

}  // namespace wsigrade
