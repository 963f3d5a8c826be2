"""
Byte-level BPE with four reserved special tokens.

Ids are dense: 0..255 are raw bytes, 256..256+M-1 are merges in training order,
then PAD, SOT, EOT and TASK_TRANSCRIBE.
"""
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

from app.errors import ConfigError, VocabError

N_BYTES = 256
SPECIALS = ("PAD", "SOT", "EOT", "TASK_TRANSCRIBE")
DEFAULT_VOCAB_SIZE = 512 + len(SPECIALS)
HEADER_PREFIX = "samba-bpe"
FORMAT_VERSION = 1

Pair = Tuple[int, int]


@dataclass(frozen=True)
class Vocab:
    merges: Tuple[Pair, ...] = ()
    _ranks: Dict[Pair, int] = field(init=False, repr=False, compare=False)
    _pieces: Tuple[bytes, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pieces = [bytes([i]) for i in range(N_BYTES)]
        for first, second in self.merges:
            if first >= len(pieces) or second >= len(pieces):
                raise VocabError(f"merge ({first}, {second}) refers to an id not yet defined")
            pieces.append(pieces[first] + pieces[second])
        object.__setattr__(self, "_pieces", tuple(pieces))
        object.__setattr__(self, "_ranks", {pair: N_BYTES + i for i, pair in enumerate(self.merges)})

    @property
    def n_merges(self) -> int:
        return len(self.merges)

    @property
    def pad_id(self) -> int:
        return N_BYTES + self.n_merges

    @property
    def sot_id(self) -> int:
        return self.pad_id + 1

    @property
    def eot_id(self) -> int:
        return self.pad_id + 2

    @property
    def task_id(self) -> int:
        return self.pad_id + 3

    @property
    def size(self) -> int:
        return N_BYTES + self.n_merges + len(SPECIALS)

    def is_special(self, token_id: int) -> bool:
        return self.pad_id <= token_id < self.size

    def piece(self, token_id: int) -> bytes:
        """Byte string of a byte or merge id."""
        return self._pieces[token_id]


def _pair_counts(sequences: Iterable[Tuple[List[int], int]]) -> Counter:
    counts: Counter = Counter()
    for ids, weight in sequences:
        for pair in zip(ids, ids[1:]):
            counts[pair] += weight
    return counts


def _merge(ids: List[int], pair: Pair, new_id: int) -> List[int]:
    out = []
    i = 0
    while i < len(ids):
        if i < len(ids) - 1 and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_bpe(corpus: Sequence[str], target_vocab: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    """Greedy merge training.

    Each round merges the most frequent adjacent pair (ties: lowest first id, then
    lowest second id). Pairs never span two corpus strings. Training stops once
    the vocabulary reaches `target_vocab` or no pair occurs at least twice.
    """
    if not corpus:
        raise ConfigError("BPE training corpus is empty")
    if target_vocab < N_BYTES + len(SPECIALS):
        raise ConfigError(f"target_vocab must be at least {N_BYTES + len(SPECIALS)}")

    # identical strings share one entry with a multiplicity
    sequences = [[list(text.encode("utf-8")), n] for text, n in Counter(corpus).items()]
    merges: List[Pair] = []
    for new_id in range(N_BYTES, target_vocab - len(SPECIALS)):
        counts = _pair_counts(sequences)
        if not counts:
            break
        pair, count = min(counts.items(), key=lambda item: (-item[1], item[0]))
        if count < 2:
            break
        merges.append(pair)
        for entry in sequences:
            entry[0] = _merge(entry[0], pair, new_id)
    return Vocab(tuple(merges))


def encode_bytes(data: bytes, vocab: Vocab) -> List[int]:
    ids = list(data)
    while len(ids) >= 2:
        # the lowest-ranked pair present is the next merge in training order
        pair = min(zip(ids, ids[1:]), key=lambda p: vocab._ranks.get(p, float("inf")))
        if pair not in vocab._ranks:
            break
        ids = _merge(ids, pair, vocab._ranks[pair])
    return ids


def encode(text: str, vocab: Vocab, wrap: bool = False) -> List[int]:
    ids = encode_bytes(text.encode("utf-8"), vocab)
    if wrap:
        return [vocab.sot_id, vocab.task_id] + ids + [vocab.eot_id]
    return ids


def decode_bytes(ids: Sequence[int], vocab: Vocab) -> bytes:
    out = bytearray()
    for token_id in ids:
        if not 0 <= token_id < vocab.size:
            raise VocabError(f"token id {token_id} outside vocabulary of size {vocab.size}")
        if not vocab.is_special(token_id):
            out += vocab.piece(token_id)
    return bytes(out)


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    return decode_bytes(ids, vocab).decode("utf-8", errors="replace")


# Vocabulary file

def dumps(vocab: Vocab) -> str:
    lines = [f"{HEADER_PREFIX} v{FORMAT_VERSION} merges={vocab.n_merges} specials={len(SPECIALS)}"]
    lines += [f"{first} {second}" for first, second in vocab.merges]
    return "\n".join(lines) + "\n"


def save_vocab(vocab: Vocab, path: Union[str, Path]):
    Path(path).write_text(dumps(vocab), encoding="utf-8")


def load_vocab(path: Union[str, Path]) -> Vocab:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise VocabError(f"cannot read vocabulary {path}: {e}") from e
    if not lines:
        raise VocabError(f"{path}: empty vocabulary file")

    header = dict(part.split("=", 1) for part in lines[0].split()[2:] if "=" in part)
    if not lines[0].startswith(f"{HEADER_PREFIX} v{FORMAT_VERSION}") or "merges" not in header:
        raise VocabError(f"{path}: unrecognized header {lines[0]!r}")
    if int(header.get("specials", len(SPECIALS))) != len(SPECIALS):
        raise VocabError(f"{path}: expected {len(SPECIALS)} specials")

    try:
        merges = tuple(tuple(int(v) for v in line.split()) for line in lines[1:] if line.strip())
    except ValueError as e:
        raise VocabError(f"{path}: malformed merge line") from e
    if len(merges) != int(header["merges"]) or any(len(m) != 2 for m in merges):
        raise VocabError(f"{path}: header declares {header['merges']} merges, found {len(merges)}")
    return Vocab(merges)


def vocab_hash(vocab: Vocab) -> str:
    return hashlib.md5(dumps(vocab).encode("utf-8")).hexdigest()
