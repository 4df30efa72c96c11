#pragma once

// Plain-text exports. Floats are written with 17 significant digits so every
// double survives a round trip.

#include <filesystem>
#include <iosfwd>
#include <string>

#include <Eigen/Core>

namespace hrta {

/// Formats x with 17 significant digits ("%.17g").
std::string format_double(double x);

/// Row-major CSV, one matrix row per line, no header.
void write_matrix_csv(std::ostream& out, const Eigen::MatrixXd& M);
void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& M);

/// Reads a headerless numeric CSV. Blank lines and lines starting with '#' are
/// skipped; every row must have the same number of columns.
Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path);

/// Opens path for writing, creating parent directories.
std::ofstream open_output(const std::filesystem::path& path);

}  // namespace hrta
