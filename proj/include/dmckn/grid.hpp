#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "dmckn/autodiff.hpp"
#include "dmckn/tensor.hpp"

namespace dmckn {

enum class Direction : std::uint8_t { Up = 0, Down = 1, Left = 2, Right = 3 };

inline constexpr std::size_t kDirectionCount = 4;
inline constexpr std::array<Direction, kDirectionCount> kDirections = {Direction::Up, Direction::Down,
                                                                      Direction::Left, Direction::Right};

std::string_view to_string(Direction d) noexcept;
inline std::size_t index_of(Direction d) noexcept { return static_cast<std::size_t>(d); }

/// Regular grid of cells; cell i sits at (i / cols, i % cols).
struct GridSpec {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t cells() const noexcept { return rows * cols; }
  std::size_t cell(std::size_t r, std::size_t c) const noexcept { return r * cols + c; }
  std::size_t row_of(std::size_t cell) const noexcept { return cell / cols; }
  std::size_t col_of(std::size_t cell) const noexcept { return cell % cols; }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

GridSpec build_grid(std::size_t rows, std::size_t cols);

/// Immediate neighbour of `cell` in direction `d`; nullopt at the border (no wraparound).
std::optional<std::size_t> neighbor(const GridSpec& grid, std::size_t cell, Direction d) noexcept;

/// Binary n×n mask with a 1 at (x, x') iff x' is the immediate neighbour of x in direction d.
Tensor build_adjacency(const GridSpec& grid, Direction d);

/// Support of a mask in compressed-row form (for masked_matmul).
std::shared_ptr<const ad::RowSupport> mask_support(const Tensor& mask);

/// Structural masks plus the learnable weights P_c living on their support.
struct NeighborhoodSystem {
  GridSpec grid;
  std::array<Tensor, kDirectionCount> masks;
  std::array<Tensor, kDirectionCount> weights;

  /// Zeroes every weight outside its mask.
  void reproject();
};

/// Masks for all directions, weights equal to the masks.
NeighborhoodSystem init_neighborhood(const GridSpec& grid);

struct PositionalEncoding {
  std::size_t dim = 0;
  Tensor table;  // cells × dim
};

/// Row x: (r/rows, c/cols) followed by sin(π2^j·r/rows), sin(π2^j·c/cols) for j = 0, 1, ...
PositionalEncoding positional_encoding(const GridSpec& grid, std::size_t dim);

using CellSets = std::vector<std::vector<std::uint32_t>>;

/// First-order sets read from a mask.
CellSets mask_neighbors(const Tensor& mask);

/// N^(p)(x) = ∪_{x' ∈ N^(1)(x)} N^(p-1)(x'), excluding x itself. Sets are sorted.
CellSets higher_order_neighbors(const GridSpec& grid, Direction d, std::size_t order);
CellSets higher_order_neighbors(const Tensor& mask, std::size_t order);

}  // namespace dmckn
