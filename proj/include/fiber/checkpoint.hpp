#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fiber/fusion.hpp"
#include "fiber/tensor.hpp"

namespace fiber {

// ---------------------------------------------------------------------------
// Checkpoint container: a language-neutral binary file holding the model
// configuration, training provenance, and every named tensor (parameters and
// optimizer slots alike).
//
// Layout:
//   bytes 0-7    magic "FIBRCKPT"
//   bytes 8-11   format version, u32 little-endian
//   bytes 12-19  header length H, u64 little-endian
//   bytes 20..   JSON header (config, stage, step, tensor manifest with
//                name/dtype/shape/offset — offsets in bytes into the payload)
//   then         payload: raw little-endian f32/f64 data, manifest order
// ---------------------------------------------------------------------------

constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    uint32_t version = kCheckpointVersion;
    FusionConfig cfg;
    std::string stage;  // "coarse", "fine", or a fine-tune task name
    int64_t step = 0;
};

struct Checkpoint {
    CheckpointMeta meta;
    // Parameters first (named_params order), then optimizer slots under
    // "opt.m." / "opt.v." prefixes.
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
};

// Byte-deterministic: the same checkpoint value always serializes to the
// same file contents.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

// DataError on missing files, bad magic, or a malformed/truncated container.
Checkpoint load_checkpoint(const std::string& path);

struct LoadReport {
    std::vector<std::string> loaded;  // model parameters copied from the file
    std::vector<std::string> fresh;   // model parameters the file lacks
    std::vector<std::string> unused;  // file tensors (optimizer slots aside) the model lacks
};

// Copies every checkpoint tensor whose name matches a model parameter into
// the model, in place. Parameters absent from the file keep their current
// (fresh) initialization — loading a coarse checkpoint into a model built
// with a detector leaves exactly the det.* names fresh. A name that matches
// with a different shape or dtype raises ConfigError.
LoadReport load_params(Model& m, const Checkpoint& ckpt);

// Config (de)serialization shared by checkpoints and the CLI inspector.
std::string config_to_json(const FusionConfig& cfg);
FusionConfig config_from_json(const std::string& text);

}  // namespace fiber
