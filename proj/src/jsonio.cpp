#include "vagmm/jsonio.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace vagmm {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void escape_json(const std::string& s, std::string& out) {
  out += '"';
  for (char ch : s) {
    switch (ch) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\b': out += "\\b"; break;
      case '\f': out += "\\f"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(ch) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x",
                        static_cast<unsigned>(static_cast<unsigned char>(ch)));
          out += buf;
        } else {
          out += ch;
        }
    }
  }
  out += '"';
}

/** Compact SHA-1 (FIPS 180-1), enough for content manifests. */
struct Sha1 {
  std::uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u,
                        0xC3D2E1F0u};
  std::uint64_t total = 0;
  unsigned char buf[64];
  std::size_t fill = 0;

  static std::uint32_t rol(std::uint32_t v, int s) {
    return (v << s) | (v >> (32 - s));
  }

  void block(const unsigned char* p) {
    std::uint32_t w[80];
    for (int i = 0; i < 16; ++i)
      w[i] = (static_cast<std::uint32_t>(p[4 * i]) << 24) |
             (static_cast<std::uint32_t>(p[4 * i + 1]) << 16) |
             (static_cast<std::uint32_t>(p[4 * i + 2]) << 8) |
             static_cast<std::uint32_t>(p[4 * i + 3]);
    for (int i = 16; i < 80; ++i)
      w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
    for (int i = 0; i < 80; ++i) {
      std::uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const std::uint32_t t = rol(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rol(b, 30);
      b = a;
      a = t;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
  }

  void update(const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    total += n;
    while (n > 0) {
      const std::size_t take = std::min(n, std::size_t{64} - fill);
      std::memcpy(buf + fill, p, take);
      fill += take;
      p += take;
      n -= take;
      if (fill == 64) {
        block(buf);
        fill = 0;
      }
    }
  }

  std::string finish() {
    const std::uint64_t bits = total * 8;
    const unsigned char pad = 0x80;
    update(&pad, 1);
    const unsigned char zero = 0;
    while (fill != 56) update(&zero, 1);
    unsigned char len[8];
    for (int i = 0; i < 8; ++i)
      len[i] = static_cast<unsigned char>((bits >> (56 - 8 * i)) & 0xFFu);
    update(len, 8);
    char out[41];
    for (int i = 0; i < 5; ++i) std::snprintf(out + 8 * i, 9, "%08x", h[i]);
    return std::string(out, 40);
  }
};

}  // namespace

JsonValue JsonValue::object() {
  JsonValue v;
  v.node_ = std::make_shared<Object>();
  return v;
}

JsonValue JsonValue::array() {
  JsonValue v;
  v.node_ = std::make_shared<Array>();
  return v;
}

JsonValue& JsonValue::set(const std::string& key, JsonValue value) {
  auto* obj = std::get_if<std::shared_ptr<Object>>(&node_);
  if (!obj) fail("JsonValue::set on a non-object value");
  for (auto& [k, v] : (*obj)->items) {
    if (k == key) {
      v = std::move(value);
      return *this;
    }
  }
  (*obj)->items.emplace_back(key, std::move(value));
  return *this;
}

JsonValue& JsonValue::push_back(JsonValue value) {
  auto* arr = std::get_if<std::shared_ptr<Array>>(&node_);
  if (!arr) fail("JsonValue::push_back on a non-array value");
  (*arr)->items.push_back(std::move(value));
  return *this;
}

void JsonValue::write(std::string& out, int indent, int depth) const {
  const auto pad = [&](int d) {
    if (indent >= 0) out.append(static_cast<std::size_t>(indent) * d, ' ');
  };
  const char* nl = indent >= 0 ? "\n" : "";
  const char* kv = indent >= 0 ? ": " : ":";

  if (std::holds_alternative<std::nullptr_t>(node_)) {
    out += "null";
  } else if (const auto* b = std::get_if<bool>(&node_)) {
    out += *b ? "true" : "false";
  } else if (const auto* i = std::get_if<int64_t>(&node_)) {
    out += std::to_string(*i);
  } else if (const auto* d = std::get_if<double>(&node_)) {
    out += std::isfinite(*d) ? format_double(*d) : "null";
  } else if (const auto* s = std::get_if<std::string>(&node_)) {
    escape_json(*s, out);
  } else if (const auto* obj = std::get_if<std::shared_ptr<Object>>(&node_)) {
    const auto& items = (*obj)->items;
    if (items.empty()) {
      out += "{}";
      return;
    }
    out += '{';
    out += nl;
    for (std::size_t i = 0; i < items.size(); ++i) {
      pad(depth + 1);
      escape_json(items[i].first, out);
      out += kv;
      items[i].second.write(out, indent, depth + 1);
      if (i + 1 < items.size()) out += ',';
      out += nl;
    }
    pad(depth);
    out += '}';
  } else {
    const auto& items = std::get<std::shared_ptr<Array>>(node_)->items;
    if (items.empty()) {
      out += "[]";
      return;
    }
    out += '[';
    out += nl;
    for (std::size_t i = 0; i < items.size(); ++i) {
      pad(depth + 1);
      items[i].write(out, indent, depth + 1);
      if (i + 1 < items.size()) out += ',';
      out += nl;
    }
    pad(depth);
    out += ']';
  }
}

std::string JsonValue::dump(int indent) const {
  std::string out;
  write(out, indent, 0);
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct CsvWriter::Impl {
  std::ofstream out;
  bool closed = false;
  std::string path;
};

CsvWriter::CsvWriter(const std::string& path) : impl_(new Impl) {
  impl_->path = path;
  impl_->out.open(path, std::ios::binary);
  if (!impl_->out) fail("CsvWriter: cannot open '" + path + "'");
}

CsvWriter::~CsvWriter() = default;

void CsvWriter::write_row(const std::vector<std::string>& fields) {
  if (impl_->closed) fail("CsvWriter: write after close on '" + impl_->path + "'");
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i > 0) line += ',';
    const std::string& f = fields[i];
    if (f.find_first_of(",\"\n\r") != std::string::npos) {
      line += '"';
      for (char c : f) {
        if (c == '"') line += '"';
        line += c;
      }
      line += '"';
    } else {
      line += f;
    }
  }
  line += '\n';
  impl_->out.write(line.data(), static_cast<std::streamsize>(line.size()));
  if (!impl_->out) fail("CsvWriter: write failed on '" + impl_->path + "'");
}

void CsvWriter::close() {
  if (impl_->closed) return;
  impl_->out.close();
  impl_->closed = true;
  if (impl_->out.fail()) fail("CsvWriter: close failed on '" + impl_->path + "'");
}

std::string blob_sha1(const std::string& data) {
  Sha1 sha;
  const std::string header = "blob " + std::to_string(data.size());
  sha.update(header.data(), header.size() + 1);  // includes the trailing NUL
  sha.update(data.data(), data.size());
  return sha.finish();
}

std::string blob_sha1_file(const std::string& path) {
  return blob_sha1(slurp(path));
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("slurp: cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (in.bad()) fail("slurp: read failed on '" + path + "'");
  return data;
}

void spit(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("spit: cannot open '" + path + "'");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  out.close();
  if (out.fail()) fail("spit: write failed on '" + path + "'");
}

}  // namespace vagmm
