#include "dapo/pretrain.hpp"

#include <numeric>
#include <stdexcept>

#include "dapo/optim.hpp"

namespace dapo {

Tensor infonce_loss(const Tensor& image_embs, const Tensor& text_embs,
                    double temperature) {
  if (image_embs.shape() != text_embs.shape())
    throw std::invalid_argument("infonce_loss: embedding stacks must match");
  int b = image_embs.dim(0);
  Tensor logits = scale(matmul(image_embs, transpose(text_embs)), 1.0 / temperature);
  Tensor eye(Shape{b, b}, 0.0);
  for (int i = 0; i < b; ++i) eye.data()[static_cast<std::size_t>(i * b + i)] = 1.0;
  auto ce_diag = [&](const Tensor& probs) {
    Tensor diag = sum_axis(mul(probs, eye), 1);
    return neg(mean(log_op(clamp_min(diag, 1e-300))));
  };
  Tensor loss_i2t = ce_diag(softmax(logits, 1));
  Tensor loss_t2i = ce_diag(softmax(logits, 0));
  return scale(add(loss_i2t, loss_t2i), 0.5);
}

BackboneWeights pretrain_backbone(const std::vector<CaptionPair>& corpus,
                                  const Vocabulary& vocab,
                                  const EncoderConfig& cfg,
                                  const PretrainConfig& pcfg, Rng& rng,
                                  std::vector<double>* loss_log) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_backbone: empty corpus");
  cfg.validate();
  std::vector<std::vector<int>> token_ids;
  token_ids.reserve(corpus.size());
  for (const CaptionPair& cp : corpus) token_ids.push_back(vocab.tokenize(cp.caption));

  BackboneWeights bb = BackboneWeights::init(cfg, vocab.size(), rng);
  bb.set_requires_grad(true);
  std::vector<Tensor> params;
  bb.for_each_param([&](const std::string&, Tensor& t) { params.push_back(t); });
  Adam opt;
  opt.lr = pcfg.lr;
  opt.register_params(params);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < pcfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(pcfg.batch)) {
      std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(pcfg.batch));
      Tape tape;
      std::vector<Tensor> img_rows, txt_rows;
      for (std::size_t i = start; i < stop; ++i) {
        const CaptionPair& cp = corpus[order[i]];
        img_rows.push_back(encode_image(cp.image, bb, nullptr, cfg, false).global);
        Tensor seq = embed_token_ids(token_ids[order[i]], bb, vocab.start_id(),
                                     vocab.end_id());
        txt_rows.push_back(
            encode_text(seq, seq.dim(0) - 1, bb, nullptr, cfg, false));
      }
      Tensor loss = infonce_loss(concat_rows(img_rows), concat_rows(txt_rows),
                                 pcfg.temperature);
      backward(loss);
      opt.step();
      opt.zero_grad();
      if (loss_log) loss_log->push_back(loss.value());
    }
  }
  bb.set_requires_grad(false);
  bb.frozen = true;
  return bb;
}

}  // namespace dapo
