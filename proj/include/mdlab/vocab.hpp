#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mdlab {

// Token id layout. Ordinary tokens occupy [0, content_size); EOS is the last
// content-vocabulary entry at index content_size; MASK sits one past it and
// is outside the prediction support. PAD exists only in stored corpora and
// lives outside the extended alphabet entirely.
struct VocabSpec {
  int content_size = 0;
  int eos_id = 0;
  int mask_id = 0;
  int pad_id = 0;
  std::vector<std::string> names;  // optional display strings

  static VocabSpec make(int content_size) {
    VocabSpec v;
    v.content_size = content_size;
    v.eos_id = content_size;
    v.mask_id = content_size + 1;
    v.pad_id = content_size + 2;
    return v;
  }

  // Prediction support: ordinary tokens + EOS.
  int support() const { return content_size + 1; }
  // Extended alphabet: support + MASK. PAD is excluded.
  int alphabet() const { return content_size + 2; }

  void validate() const {
    if (content_size < 1) throw std::invalid_argument("VocabSpec: content_size must be >= 1");
    if (eos_id != content_size)
      throw std::invalid_argument("VocabSpec: eos_id must equal content_size");
    if (mask_id != content_size + 1)
      throw std::invalid_argument("VocabSpec: mask_id must be content_size + 1");
    if (pad_id == eos_id || pad_id == mask_id)
      throw std::invalid_argument("VocabSpec: pad_id must be distinct from eos_id and mask_id");
  }

  bool is_content(int tok) const { return tok >= 0 && tok < content_size; }
  bool in_support(int tok) const { return tok >= 0 && tok < support(); }
};

}  // namespace mdlab
