"""
Mamba encoder-decoder speech recognizer.

Encoder: two-conv stem (stride 1 then 2, SiLU) -> Mamba blocks -> LayerNorm.
Decoder: token + learned positional embeddings -> per layer a self block and a
cross-connection block -> LayerNorm -> vocabulary projection.

The cross-connection runs one Mamba block over [encoder features; decoder
hidden] and keeps the decoder positions, so decoder position t sees the whole
utterance and tokens 0..t only. No attention mask exists anywhere: causality
comes from the left-to-right scans.
"""
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from app.errors import ContractError, LengthError, ShapeError, VocabError
from app.models import ModelConfig
from app.services import numerics as nx
from app.services.audio import MelSpectrogram
from app.services.layers import LayerNorm, Linear, ParameterStore, uniform_init
from app.services.numerics import Tensor
from app.services.selective_scan import BlockCache, MambaBlock
from app.services.tokenizer import Vocab, decode

STEM_KERNEL = 3
STEM_PADDING = 1


class SpecialIds(NamedTuple):
    pad: int
    sot: int
    eot: int
    task: int

    @classmethod
    def for_vocab_size(cls, vocab_size: int) -> "SpecialIds":
        # specials occupy the last four ids
        return cls(vocab_size - 4, vocab_size - 3, vocab_size - 2, vocab_size - 1)


@dataclass
class EncoderOutput:
    features: Tensor  # (S, d_model)

    @property
    def S(self) -> int:
        return self.features.shape[0]


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form size of SambaASR(cfg)."""
    d, v = cfg.d_model, cfg.vocab_size
    block = MambaBlock.parameter_count(d, cfg.d_inner, cfg.d_state, cfg.conv_kernel, cfg.use_skip)
    stem = STEM_KERNEL * cfg.n_mels * d + d + STEM_KERNEL * d * d + d
    encoder = stem + cfg.n_encoder_layers * block + 2 * d
    decoder = (v * d + cfg.max_text_len * d
               + cfg.n_decoder_layers * 2 * block
               + 2 * d + d * v + v)
    return encoder + decoder


class SambaASR:
    def __init__(self, cfg: ModelConfig, seed: int = 0, scan_partition: int = 0, scan_workers: int = 1):
        self.cfg = cfg
        self.specials = SpecialIds.for_vocab_size(cfg.vocab_size)
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        d = cfg.d_model

        def block(name: str) -> MambaBlock:
            return MambaBlock(self.store, name, d, cfg.d_inner, cfg.d_state, cfg.conv_kernel, rng,
                              use_skip=cfg.use_skip, scan_method=cfg.scan_method,
                              partition=scan_partition, workers=scan_workers)

        s = self.store
        self.stem = (
            (s.add("encoder.stem.0.weight", uniform_init(rng, STEM_KERNEL * cfg.n_mels, (STEM_KERNEL, cfg.n_mels, d))),
             s.add("encoder.stem.0.bias", np.zeros(d))),
            (s.add("encoder.stem.1.weight", uniform_init(rng, STEM_KERNEL * d, (STEM_KERNEL, d, d))),
             s.add("encoder.stem.1.bias", np.zeros(d))),
        )
        self.encoder_blocks = [block(f"encoder.blocks.{i}") for i in range(cfg.n_encoder_layers)]
        self.encoder_norm = LayerNorm(s, "encoder.norm", d)

        self.token_embedding = s.add("decoder.token_embedding", uniform_init(rng, d, (cfg.vocab_size, d)))
        self.position_embedding = s.add("decoder.position_embedding", uniform_init(rng, d, (cfg.max_text_len, d)))
        self.decoder_layers: List[Tuple[MambaBlock, MambaBlock]] = [
            (block(f"decoder.blocks.{i}.self"), block(f"decoder.blocks.{i}.cross"))
            for i in range(cfg.n_decoder_layers)
        ]
        self.decoder_norm = LayerNorm(s, "decoder.norm", d)
        self.head = Linear(s, "decoder.head", d, cfg.vocab_size, rng)

    def parameter_count(self) -> int:
        return self.store.count()

    # Encoder

    def encoder_forward(self, mel: MelSpectrogram) -> EncoderOutput:
        if mel.n_mels != self.cfg.n_mels or mel.values.shape[1] != self.cfg.n_mels:
            raise ShapeError(f"model expects {self.cfg.n_mels} mel channels, got {mel.values.shape}")
        x = Tensor(mel.values)
        for stride, (weight, bias) in zip((1, 2), self.stem):
            x = nx.silu(nx.conv1d(x, self.store[weight], stride=stride, padding=STEM_PADDING) + self.store[bias])
        for blk in self.encoder_blocks:
            x = blk(x)
        return EncoderOutput(self.encoder_norm(x))

    # Decoder

    @staticmethod
    def cross_connection(hidden: Tensor, enc: EncoderOutput, block: MambaBlock) -> Tensor:
        """Scan over [encoder features; hidden] and return the hidden positions.

        The block's own residual adds `hidden` back onto those positions.
        """
        if hidden.ndim != 2 or hidden.shape[1] != enc.features.shape[1]:
            raise ShapeError(f"decoder hidden {hidden.shape} does not match encoder width {enc.features.shape[1]}")
        z = nx.concat([enc.features, hidden], axis=0)
        out = block(z)
        return nx.take(out, enc.S, enc.S + hidden.shape[0], axis=0)

    def _check_tokens(self, tokens: Sequence[int]):
        if len(tokens) < 1:
            raise ContractError("decoder needs at least one token")
        if len(tokens) > self.cfg.max_text_len:
            raise LengthError(f"{len(tokens)} tokens exceed max_text_len={self.cfg.max_text_len}")
        bad = [t for t in tokens if not 0 <= t < self.cfg.vocab_size]
        if bad:
            raise VocabError(f"token ids {bad[:5]} outside vocabulary of size {self.cfg.vocab_size}")

    def decoder_forward(self, tokens: Sequence[int], enc: EncoderOutput) -> Tensor:
        """Logits (T, vocab_size); softmax is left to the loss or the decoder loop."""
        self._check_tokens(tokens)
        t_len = len(tokens)
        x = nx.embedding(self.store[self.token_embedding], tokens) \
            + nx.take(self.store[self.position_embedding], 0, t_len, axis=0)
        for self_block, cross_block in self.decoder_layers:
            x = self_block(x)
            x = self.cross_connection(x, enc, cross_block)
        return self.head(self.decoder_norm(x))

    def forward(self, mel: MelSpectrogram, tokens: Sequence[int]) -> Tensor:
        return self.decoder_forward(tokens, self.encoder_forward(mel))

    def loss(self, mel: MelSpectrogram, tokens: Sequence[int]) -> Tensor:
        """Next-token cross-entropy: inputs tokens[:-1], targets tokens[1:], PAD ignored."""
        if len(tokens) < 2:
            raise ContractError("the loss needs at least two tokens")
        logits = self.forward(mel, tokens[:-1])
        return nx.softmax_cross_entropy(logits, tokens[1:], ignore_id=self.specials.pad)

    # Inference

    def session(self, enc: EncoderOutput) -> "DecodeSession":
        return DecodeSession(self, enc)

    def greedy_decode(self, mel: MelSpectrogram, max_len: Optional[int] = None) -> List[int]:
        """Argmax decoding from [SOT, TASK_TRANSCRIBE] until EOT or `max_len` total tokens.

        Returns the generated ids without the priming tokens and without EOT.
        """
        max_len = self.cfg.max_text_len if max_len is None else max_len
        if max_len > self.cfg.max_text_len:
            raise LengthError(f"max_len {max_len} exceeds max_text_len {self.cfg.max_text_len}")
        prompt = [self.specials.sot, self.specials.task]
        if max_len <= len(prompt):
            return []

        sess = self.session(self.encoder_forward(mel))
        for token in prompt[:-1]:
            sess.step(token)
        logits = sess.step(prompt[-1])
        generated: List[int] = []
        while True:
            next_id = int(np.argmax(logits))  # first maximum, i.e. the lowest id on ties
            if next_id == self.specials.eot:
                break
            generated.append(next_id)
            if len(prompt) + len(generated) >= max_len:
                break
            logits = sess.step(next_id)
        return generated

    def transcribe(self, mel: MelSpectrogram, vocab: Vocab, max_len: Optional[int] = None) -> Tuple[str, List[int]]:
        if vocab.size != self.cfg.vocab_size:
            raise VocabError(f"vocabulary has {vocab.size} ids, model expects {self.cfg.vocab_size}")
        ids = self.greedy_decode(mel, max_len)
        return decode(ids, vocab), ids


class DecodeSession:
    """Private incremental state for one utterance: per-block conv buffers and SSM states.

    Cross blocks are prefilled with the encoder features, so each step costs
    O(layers) regardless of how many tokens came before.
    """

    def __init__(self, model: SambaASR, enc: EncoderOutput):
        self.model = model
        self.position = 0
        enc_features = enc.features.data
        self.caches: List[Tuple[BlockCache, BlockCache]] = []
        for self_block, cross_block in model.decoder_layers:
            _, cross_cache = cross_block.prefill(enc_features)
            self.caches.append((self_block.empty_cache(), cross_cache))

    def step(self, token_id: int) -> np.ndarray:
        """Feed one token and return the logits for the next position."""
        m = self.model
        if self.position >= m.cfg.max_text_len:
            raise LengthError(f"decode session exceeded max_text_len={m.cfg.max_text_len}")
        if not 0 <= token_id < m.cfg.vocab_size:
            raise VocabError(f"token id {token_id} outside vocabulary of size {m.cfg.vocab_size}")

        x = m.store[m.token_embedding].data[token_id] + m.store[m.position_embedding].data[self.position]
        for (self_block, cross_block), (self_cache, cross_cache) in zip(m.decoder_layers, self.caches):
            x = self_block.step(x, self_cache)
            x = cross_block.step(x, cross_cache)
        self.position += 1
        return m.head.apply(m.decoder_norm.apply(x))
