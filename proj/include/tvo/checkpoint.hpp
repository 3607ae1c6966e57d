#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tvo/autodiff.hpp"

namespace tvo {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedBuffer {
  std::string name;
  std::vector<double> values;
};

/// Binary layout: "TVOM", u32 version, u32 segment count, then per segment
/// u32 name length, name bytes, u64 element count and raw f64 values. All
/// integers and floats are little-endian.
void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedBuffer>& segments);
std::vector<NamedBuffer> read_checkpoint(const std::filesystem::path& path);

/// Parameters followed by any extra buffers (e.g. "buffer/x_bar").
void save_checkpoint(const std::filesystem::path& path, const ParamVector& params,
                     const std::vector<NamedBuffer>& buffers = {});

/// Fills every segment of `layout` from the file. Throws FormatError when a
/// segment is missing or has the wrong element count.
ParamVector load_params(const std::filesystem::path& path, std::shared_ptr<const ParamLayout> layout);

/// Buffer by name from a loaded checkpoint, or nullptr.
const NamedBuffer* find_buffer(const std::vector<NamedBuffer>& segments, const std::string& name);

}  // namespace tvo
