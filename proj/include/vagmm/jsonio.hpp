#pragma once

/**
 * \file jsonio.hpp
 * \brief Deterministic artifact output: an insertion-ordered JSON emitter
 *        with full-precision doubles (%.17g), a minimal CSV writer, and a
 *        SHA-1 content hash (git blob convention) for the run manifest.
 */

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace vagmm {

/**
 * Tiny write-only JSON value. Keys keep insertion order so that emitted
 * manifests are byte-stable across runs and platforms.
 */
class JsonValue {
 public:
  JsonValue() : node_(nullptr) {}  // null
  JsonValue(bool b) : node_(b) {}
  JsonValue(int v) : node_(static_cast<int64_t>(v)) {}
  JsonValue(int64_t v) : node_(v) {}
  JsonValue(uint64_t v) : node_(static_cast<int64_t>(v)) {}
  JsonValue(double v) : node_(v) {}
  JsonValue(const char* s) : node_(std::string(s)) {}
  JsonValue(std::string s) : node_(std::move(s)) {}

  static JsonValue object();
  static JsonValue array();

  /** Object insert/overwrite (keeps first-insertion position). */
  JsonValue& set(const std::string& key, JsonValue value);
  /** Array append. */
  JsonValue& push_back(JsonValue value);

  /** Serialize; `indent` < 0 means compact single-line. */
  std::string dump(int indent = 2) const;

 private:
  struct Object {
    std::vector<std::pair<std::string, JsonValue>> items;
  };
  struct Array {
    std::vector<JsonValue> items;
  };
  std::variant<std::nullptr_t, bool, int64_t, double, std::string,
               std::shared_ptr<Object>, std::shared_ptr<Array>>
      node_;

  void write(std::string& out, int indent, int depth) const;
};

/** Full-precision, locale-independent double formatting (%.17g). */
std::string format_double(double v);

/** CSV row writer: quotes fields only when needed; "\n" line endings. */
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void write_row(const std::vector<std::string>& fields);
  /** Flushes and closes; subsequent writes are errors. */
  void close();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/** Hex SHA-1 of `data` framed as a git blob ("blob <size>\0<data>"). */
std::string blob_sha1(const std::string& data);

/** blob_sha1 of a file's contents. */
std::string blob_sha1_file(const std::string& path);

/** Read a whole file into a string (throws on failure). */
std::string slurp(const std::string& path);

/** Write a string to a file atomically enough for our purposes. */
void spit(const std::string& path, const std::string& data);

}  // namespace vagmm
