#include "lfm/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace lfm {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string json_digest(const nlohmann::json& j) { return fnv1a_hex(j.dump()); }

namespace {
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw FormatError("truncated tensor stream");
  return v;
}
}  // namespace

void write_tensor(std::ostream& os, const Tensor<float>& t) {
  put_u64(os, t.rank());
  for (auto e : t.shape()) put_u64(os, e);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

Tensor<float> read_tensor(std::istream& is) {
  const std::uint64_t rank = get_u64(is);
  if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& e : shape) {
    e = get_u64(is);
    n *= e;
  }
  if (n > (std::uint64_t(1) << 34)) throw FormatError("implausible tensor size");
  std::vector<float> data(n);
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)))) {
    throw FormatError("truncated tensor data");
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

void write_container(const std::filesystem::path& path, nlohmann::json header,
                     const NamedTensors& tensors) {
  std::ostringstream payload;
  for (const auto& [name, t] : tensors) {
    put_u64(payload, name.size());
    payload.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(payload, t);
  }
  const std::string bytes = payload.str();
  header["version"] = kContainerVersion;
  header["tensor_count"] = tensors.size();
  header["payload_digest"] = fnv1a_hex(bytes);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string head = header.dump();
  os.write(head.data(), static_cast<std::streamsize>(head.size()));
  os.put('\n');
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path, const std::string& expected_format) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string head;
  if (!std::getline(is, head)) throw FormatError(path.string() + ": missing header");
  Container c;
  try {
    c.header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
  if (c.header.value("format", std::string{}) != expected_format) {
    throw FormatError(path.string() + ": expected format '" + expected_format + "', found '" +
                      c.header.value("format", std::string{}) + "'");
  }
  if (c.header.value("version", -1) != kContainerVersion) {
    throw FormatError(path.string() + ": unsupported version " +
                      std::to_string(c.header.value("version", -1)) + " (expected " +
                      std::to_string(kContainerVersion) + ")");
  }
  const std::string bytes{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  const std::string digest = fnv1a_hex(bytes);
  const bool digest_ok = digest == c.header.value("payload_digest", std::string{});
  // Structural errors (truncation) take precedence over the digest report.
  std::istringstream payload(bytes);
  const std::size_t count = c.header.value("tensor_count", std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t len = get_u64(payload);
    if (len > 4096) throw FormatError(path.string() + ": implausible tensor name length");
    std::string name(len, '\0');
    if (!payload.read(name.data(), static_cast<std::streamsize>(len))) {
      throw FormatError(path.string() + ": truncated tensor name");
    }
    c.tensors.emplace_back(std::move(name), read_tensor(payload));
  }
  if (!digest_ok) {
    throw DigestError(path.string() + ": payload digest mismatch (stored " +
                      c.header.value("payload_digest", std::string{}) + ", computed " + digest + ")");
  }
  if (payload.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + ": trailing bytes after " + std::to_string(count) + " tensors");
  }
  return c;
}

}  // namespace lfm
