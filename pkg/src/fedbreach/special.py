"""Reserved token ids shared by the tokenizer and the model."""

PAD, UNK, MASK, EOS = "[PAD]", "[UNK]", "[MASK]", "[EOS]"
RESERVED_TOKENS = (PAD, UNK, MASK, EOS)

PAD_ID, UNK_ID, MASK_ID, EOS_ID = range(len(RESERVED_TOKENS))
NUM_RESERVED = len(RESERVED_TOKENS)
