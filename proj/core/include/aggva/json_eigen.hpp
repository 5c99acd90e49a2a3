#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "aggva/error.hpp"

namespace aggva::json_eigen {

inline nlohmann::json from_vector(const Eigen::VectorXd& v) {
  nlohmann::json j = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

inline nlohmann::json from_matrix(const Eigen::MatrixXd& M) {
  nlohmann::json j = nlohmann::json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index k = 0; k < M.cols(); ++k) row.push_back(M(i, k));
    j.push_back(std::move(row));
  }
  return j;
}

inline Eigen::VectorXd to_vector(const nlohmann::json& j) {
  if (!j.is_array()) throw DataError("expected a JSON array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

inline Eigen::MatrixXd to_matrix(const nlohmann::json& j) {
  if (!j.is_array()) throw DataError("expected a JSON array of rows");
  if (j.empty()) return {};
  const std::size_t cols = j[0].size();
  Eigen::MatrixXd M(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].size() != cols) throw DataError("ragged matrix in JSON");
    for (std::size_t k = 0; k < cols; ++k)
      M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = j[i][k].get<double>();
  }
  return M;
}

}  // namespace aggva::json_eigen
