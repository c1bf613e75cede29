#include "presem/losses.hpp"

namespace presem {

void LossWeights::validate() const {
  const double all[] = {sg, sem, pr, rgb, depth, sdf, fs, eik, smooth, sem_rgb, sem_depth, model};
  for (double v : all)
    if (!(v >= 0.0)) throw std::domain_error("loss weights must be nonnegative");
  if (!(truncation > 0.0)) throw std::domain_error("truncation must be positive");
}

LossVector loss_coefficients(const LossWeights& w, Stage stage) {
  const double model = stage == Stage::kFine ? w.model : 1.0;
  LossVector c{};
  c[term_index(LossTerm::kPr)] = w.sg * w.pr;
  c[term_index(LossTerm::kRgb)] = w.sg * w.rgb * model;
  c[term_index(LossTerm::kDepth)] = w.sg * w.depth * model;
  c[term_index(LossTerm::kSdf)] = w.sg * w.sdf;
  c[term_index(LossTerm::kFs)] = w.sg * w.fs;
  c[term_index(LossTerm::kEikonal)] = w.sg * w.eik;
  c[term_index(LossTerm::kSmooth)] = w.sg * w.smooth;
  c[term_index(LossTerm::kSemRgb)] = w.sem * w.sem_rgb;
  c[term_index(LossTerm::kSemDepth)] = w.sem * w.sem_depth;
  return c;
}

LossBreakdown total_loss(const LossVector& components, const LossWeights& w, Stage stage) {
  const LossVector c = loss_coefficients(w, stage);
  LossBreakdown b;
  b.components = components;
  for (std::size_t i = 0; i < kNumLossTerms; ++i) b.total += c[i] * components[i];
  return b;
}

}  // namespace presem
