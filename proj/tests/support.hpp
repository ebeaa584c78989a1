#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "mnar/data_model.hpp"

namespace mnar::test {

inline std::string tmp_path(const std::string& name) { return std::string(MNAR_TEST_TMP) + "/" + name; }

inline std::string write_file(const std::string& name, const std::string& text) {
  const std::string path = tmp_path(name);
  std::ofstream(path) << text;
  return path;
}

inline double max_abs(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace mnar::test
