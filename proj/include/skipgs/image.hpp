#pragma once

#include <algorithm>
#include <cstddef>
#include <sstream>
#include <vector>

#include "skipgs/error.hpp"

namespace skipgs {

// Row-major, RGB-interleaved image.
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, T fill = T(0)) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * 3 + c;
  }
  T& at(int x, int y, int c) { return data[index(x, y, c)]; }
  const T& at(int x, int y, int c) const { return data[index(x, y, c)]; }
  std::size_t size() const { return data.size(); }

  bool same_shape(const Image& o) const { return width == o.width && height == o.height; }

  Image clamped() const {
    Image out = *this;
    for (T& v : out.data) v = std::clamp(v, T(0), T(1));
    return out;
  }

  template <typename U>
  Image<U> cast() const {
    Image<U> out(width, height);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Image&) const = default;
};

template <typename T>
void require_same_shape(const Image<T>& a, const Image<T>& b, const char* what) {
  if (!a.same_shape(b) || a.data.size() != b.data.size()) {
    std::ostringstream os;
    os << what << ": image shapes differ (" << a.width << "x" << a.height << " vs " << b.width << "x"
       << b.height << ")";
    throw ValidationError(os.str());
  }
}

}  // namespace skipgs
