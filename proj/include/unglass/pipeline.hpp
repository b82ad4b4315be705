#pragma once

#include "unglass/evalkit.hpp"
#include "unglass/trainer.hpp"

namespace unglass {

/// Recognition embedder backed by a trained identity extractor.
class IdentityEmbedder : public Embedder {
 public:
  explicit IdentityEmbedder(IdentityExtractor<float>& ie, int batch = 16) : ie_(ie), batch_(batch) {}

  int dim() const override { return ie_.config().embedding_dim; }

  RowMatrix<double> embed(const std::vector<Image>& images) override {
    const int size = ie_.config().input_size;
    RowMatrix<double> out(Eigen::Index(images.size()), dim());
    for (std::size_t first = 0; first < images.size(); first += std::size_t(batch_)) {
      const int n = int(std::min<std::size_t>(std::size_t(batch_), images.size() - first));
      Tensor<float> t(n, 3, size, size);
      for (int i = 0; i < n; ++i) t.set_sample(i, resize_image(images[first + std::size_t(i)], size));
      const Tensor<float> e = ie_.forward(t);
      for (int i = 0; i < n; ++i) {
        out.row(Eigen::Index(first) + i) = embedding_of(e, i).cast<double>().transpose();
      }
    }
    return out;
  }

 private:
  IdentityExtractor<float>& ie_;
  int batch_;
};

inline RemovalFn removal_fn(Generator<float>& g) {
  return [&g](const Image& x) { return remove_glasses(g, x); };
}

}  // namespace unglass
