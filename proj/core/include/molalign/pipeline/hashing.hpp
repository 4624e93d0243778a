#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace molalign::pipeline {

std::string sha256_hex(std::string_view bytes);
// Hash git gives the file as a blob: sha1("blob <size>\0" + contents).
std::string git_blob_sha1(std::string_view contents);
std::string git_blob_sha1_file(const std::filesystem::path& path);

// Whole-file read; throws IoError naming the path.
std::string read_file(const std::filesystem::path& path);

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace molalign::pipeline
