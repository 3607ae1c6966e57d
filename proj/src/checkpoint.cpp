#include "tvo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tvo/errors.hpp"

namespace tvo {

namespace {

constexpr char kMagic[4] = {'T', 'V', 'O', 'M'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedBuffer>& segments) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(segments.size()));
  for (const auto& seg : segments) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(seg.name.size()));
    out += seg.name;
    put_le<std::uint64_t>(out, seg.values.size());
    for (double v : seg.values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot open checkpoint for writing: " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("failed writing checkpoint: " + path.string());
}

std::vector<NamedBuffer> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open checkpoint: " + path.string());
  Reader r(std::string(std::istreambuf_iterator<char>(file), {}));
  if (r.take(4, "magic") != std::string(kMagic, 4)) throw FormatError("not a TVOM checkpoint (bad magic)", 0);
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const auto count = r.le<std::uint32_t>("segment count");
  std::vector<NamedBuffer> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedBuffer seg;
    const auto name_len = r.le<std::uint32_t>("segment name length");
    seg.name = r.take(name_len, "segment name");
    const auto n = r.le<std::uint64_t>("element count");
    seg.values.reserve(n);
    for (std::uint64_t j = 0; j < n; ++j) seg.values.push_back(std::bit_cast<double>(r.le<std::uint64_t>("values")));
    out.push_back(std::move(seg));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last checkpoint segment", r.pos());
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParamVector& params,
                     const std::vector<NamedBuffer>& buffers) {
  std::vector<NamedBuffer> segments;
  for (const Segment& seg : params.layout().segments()) {
    auto v = params.segment(seg.name);
    segments.push_back({seg.name, {v.begin(), v.end()}});
  }
  segments.insert(segments.end(), buffers.begin(), buffers.end());
  write_checkpoint(path, segments);
}

const NamedBuffer* find_buffer(const std::vector<NamedBuffer>& segments, const std::string& name) {
  for (const auto& s : segments) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

ParamVector load_params(const std::filesystem::path& path, std::shared_ptr<const ParamLayout> layout) {
  const auto segments = read_checkpoint(path);
  ParamVector params(layout);
  for (const Segment& seg : layout->segments()) {
    const NamedBuffer* buf = find_buffer(segments, seg.name);
    if (!buf) throw FormatError("checkpoint has no segment '" + seg.name + "'", 0);
    if (buf->values.size() != seg.size()) {
      throw FormatError("checkpoint segment '" + seg.name + "' has " + std::to_string(buf->values.size()) +
                            " elements, expected " + std::to_string(seg.size()),
                        0);
    }
    std::copy(buf->values.begin(), buf->values.end(), params.segment(seg.name).begin());
  }
  return params;
}

}  // namespace tvo
