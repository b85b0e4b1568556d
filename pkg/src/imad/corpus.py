"""Synthetic assembly corpora: toy ISA, clone transforms, labeled executables.

The generator produces three corpora from one seeded PRNG:

* masked-prediction blocks -- opcode sequences follow one of four disjoint
  cyclic patterns, so the opcode at any position is uniquely determined by
  either neighbor.  This gives the masked-instruction task a computable
  ground truth: a model that reads context can beat the majority baseline by
  a wide, checkable margin.
* clone pairs -- semantics-preserving rewrites (consistent register renames,
  commutative operand swaps, table-driven instruction substitution, nop
  insertion) of base functions are labeled +1 against the original; randomly
  paired distinct functions are labeled -1, class-balanced.
* labeled executables -- benign/malicious records whose code (opcode-pattern
  mixture), strings, imports, and header numerics all carry class-correlated
  but overlapping signal, so detection is learnable from either view and
  better from both.

Corpus files are JSON-lines with string tokens; ``functions`` nests
[function][block][opcode, operand1, operand2].  All randomness flows from the
seed: the same seed yields byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMPTY = "EMPTY"
NOP = ("nop", EMPTY, EMPTY)

OPCODES = (
    "mov", "add", "sub", "inc", "dec", "xor", "and", "or",
    "push", "pop", "cmp", "test", "jmp", "je", "jne", "call",
    "ret", "lea", "mul", "div", "shl", "shr", "nop", "int",
)

REGISTERS = ("eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp")

# disjoint cyclic opcode patterns; each opcode appears at exactly one slot
OPCODE_PATTERNS = (
    ("mov", "add", "cmp", "je", "inc", "push"),
    ("xor", "sub", "test", "jne", "dec", "pop"),
    ("lea", "mul", "shl", "jmp", "and", "call"),
    ("or", "div", "shr", "nop", "int", "ret"),
)

# operand slots per opcode: reg / imm / reg_or_imm / label / mem / none
OPERAND_TEMPLATES = {
    "mov": ("reg", "reg_or_imm"), "add": ("reg", "reg_or_imm"),
    "sub": ("reg", "reg_or_imm"), "xor": ("reg", "reg_or_imm"),
    "and": ("reg", "reg_or_imm"), "or": ("reg", "reg_or_imm"),
    "cmp": ("reg", "reg_or_imm"), "test": ("reg", "reg_or_imm"),
    "inc": ("reg", "none"), "dec": ("reg", "none"), "pop": ("reg", "none"),
    "mul": ("reg", "none"), "div": ("reg", "none"),
    "push": ("reg_or_imm", "none"), "int": ("imm", "none"),
    "jmp": ("label", "none"), "je": ("label", "none"), "jne": ("label", "none"),
    "call": ("label", "none"),
    "lea": ("reg", "mem"), "shl": ("reg", "imm"), "shr": ("reg", "imm"),
    "ret": ("none", "none"), "nop": ("none", "none"),
}

COMMUTATIVE_OPCODES = frozenset({"add", "and", "or", "xor", "test"})

CLONE_TRANSFORM_KINDS = ("register-rename", "operand-swap", "substitution", "nop-insertion")


def _default_immediates():
    return tuple(str(v) for v in range(48)) + tuple(
        hex(v) for v in (0x40, 0x80, 0x100, 0x200, 0x400, 0x800,
                         0x1000, 0x2000, 0x4000, 0x8000))


def _default_mem_tokens():
    out = [f"[{r}]" for r in REGISTERS]
    out += [f"[{r}+{d}]" for r in REGISTERS for d in (4, 8)]
    return tuple(out)


def _default_labels():
    return tuple(f"loc_{i:x}" for i in range(24)) + tuple(f"proc_{i:x}" for i in range(16))


@dataclass(frozen=True)
class ToyIsaSpec:
    """Token universe of the synthetic ISA (at most two operands everywhere)."""

    opcodes: tuple = OPCODES
    registers: tuple = REGISTERS
    immediates: tuple = field(default_factory=_default_immediates)
    mem_tokens: tuple = field(default_factory=_default_mem_tokens)
    labels: tuple = field(default_factory=_default_labels)

    def operand_tokens(self):
        return self.registers + self.immediates + self.mem_tokens + self.labels


@dataclass
class CorpusSizes:
    mam_blocks: int = 20000
    clone_pairs: int = 4000
    executables: int = 2000

    def validate(self):
        for name, value in self.__dict__.items():
            if value < 1:
                raise ValueError(f"corpus size {name} must be positive, got {value}")


# ---------------------------------------------------------------------------
# clone transforms (token level)


def apply_register_rename(function, mapping):
    """Consistently rename registers, including inside memory operands."""

    def rename(token):
        if token in mapping:
            return mapping[token]
        if token.startswith("[") and token.endswith("]"):
            inner = token[1:-1]
            reg, plus, offset = inner.partition("+")
            if reg in mapping:
                return f"[{mapping[reg]}{plus}{offset}]" if plus else f"[{mapping[reg]}]"
        return token

    return [[[opc, rename(o1), rename(o2)] for opc, o1, o2 in block] for block in function]


def apply_operand_swap(function, positions):
    """Swap the operands of commutative reg,reg instructions at the given spots.

    ``positions`` is a set of (block index, instruction index); swapping the
    same position twice is the identity.
    """
    out = []
    for bi, block in enumerate(function):
        rows = []
        for ii, (opc, o1, o2) in enumerate(block):
            if (bi, ii) in positions:
                if opc not in COMMUTATIVE_OPCODES:
                    raise ValueError(f"operand swap on non-commutative opcode {opc!r}")
                rows.append([opc, o2, o1])
            else:
                rows.append([opc, o1, o2])
        out.append(rows)
    return out


def _substitute(opc, o1, o2, registers):
    """One step of the fixed equivalence table, or None when nothing applies."""
    if opc == "add" and o2 == "1":
        return ["inc", o1, EMPTY]
    if opc == "inc":
        return ["add", o1, "1"]
    if opc == "sub" and o2 == "1":
        return ["dec", o1, EMPTY]
    if opc == "dec":
        return ["sub", o1, "1"]
    if opc == "xor" and o1 == o2 and o1 in registers:
        return ["mov", o1, "0"]
    if opc == "mov" and o2 == "0":
        return ["xor", o1, o1]
    if opc == "shl" and o2 == "1":
        return ["add", o1, o1]
    return None


def apply_substitution(function, rng, registers=REGISTERS, prob=0.6):
    out = []
    for block in function:
        rows = []
        for opc, o1, o2 in block:
            repl = _substitute(opc, o1, o2, registers)
            if repl is not None and rng.random() < prob:
                rows.append(repl)
            else:
                rows.append([opc, o1, o2])
        out.append(rows)
    return out


def apply_nop_insertion(function, rng, max_nops=3):
    out = [list(map(list, block)) for block in function]
    for _ in range(int(rng.integers(1, max_nops + 1))):
        block = out[int(rng.integers(0, len(out)))]
        block.insert(int(rng.integers(0, len(block) + 1)), list(NOP))
    return out


def make_clone(function, rng, registers=REGISTERS):
    """Semantics-preserving rewrite that always differs textually in >= 1 instruction."""
    perm = list(registers)
    while True:
        rng.shuffle(perm)
        if any(a != b for a, b in zip(perm, registers)):
            break
    clone = apply_register_rename(function, dict(zip(registers, perm)))
    swap_spots = {
        (bi, ii)
        for bi, block in enumerate(clone)
        for ii, (opc, o1, o2) in enumerate(block)
        if opc in COMMUTATIVE_OPCODES and o1 in registers and o2 in registers
        and rng.random() < 0.5
    }
    clone = apply_operand_swap(clone, swap_spots)
    clone = apply_substitution(clone, rng, registers)
    if rng.random() < 0.7:
        clone = apply_nop_insertion(clone, rng)
    if clone == [list(map(list, b)) for b in function]:
        clone = apply_nop_insertion(clone, rng, max_nops=1)
    return clone


# ---------------------------------------------------------------------------
# generation


class CorpusGenerator:
    """Seeded generator for all three corpora over one toy ISA."""

    def __init__(self, spec: ToyIsaSpec | None = None, seed=0):
        self.spec = spec or ToyIsaSpec()
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._check_patterns()

    def _check_patterns(self):
        flat = [o for p in OPCODE_PATTERNS for o in p]
        if sorted(flat) != sorted(set(flat)):
            raise ValueError("opcode patterns must be disjoint")
        missing = set(flat) - set(self.spec.opcodes)
        if missing:
            raise ValueError(f"patterns use opcodes outside the ISA: {missing}")

    # -- token sampling ----------------------------------------------------

    def _operand(self, kind):
        rng, spec = self.rng, self.spec
        if kind == "none":
            return EMPTY
        if kind == "reg":
            return spec.registers[int(rng.integers(len(spec.registers)))]
        if kind == "imm":
            return spec.immediates[int(rng.integers(len(spec.immediates)))]
        if kind == "reg_or_imm":
            return self._operand("reg" if rng.random() < 0.6 else "imm")
        if kind == "label":
            return spec.labels[int(rng.integers(len(spec.labels)))]
        if kind == "mem":
            return spec.mem_tokens[int(rng.integers(len(spec.mem_tokens)))]
        raise KeyError(kind)

    def instruction(self, opcode):
        k1, k2 = OPERAND_TEMPLATES[opcode]
        return [opcode, self._operand(k1), self._operand(k2)]

    def grammar_block(self, length, pattern_index=None):
        """Block whose opcodes walk one cyclic pattern from a random phase."""
        if pattern_index is None:
            pattern_index = int(self.rng.integers(len(OPCODE_PATTERNS)))
        pattern = OPCODE_PATTERNS[pattern_index]
        phase = int(self.rng.integers(len(pattern)))
        return [self.instruction(pattern[(phase + j) % len(pattern)]) for j in range(length)]

    def function(self, n_blocks, block_len_range, pattern_probs=None):
        blocks = []
        for _ in range(n_blocks):
            if pattern_probs is None:
                idx = None
            else:
                idx = int(self.rng.choice(len(OPCODE_PATTERNS), p=pattern_probs))
            length = int(self.rng.integers(block_len_range[0], block_len_range[1] + 1))
            blocks.append(self.grammar_block(length, idx))
        return blocks

    # -- corpora -----------------------------------------------------------

    def mam_records(self, count, block_len_range=(5, 30)):
        for i in range(count):
            length = int(self.rng.integers(block_len_range[0], block_len_range[1] + 1))
            yield {"id": f"mam_{i:06d}", "functions": [[self.grammar_block(length)]]}

    def clone_records(self, count, blocks_range=(2, 5), block_len_range=(5, 14)):
        n_clone = count // 2
        n_other = count - n_clone
        base = [
            self.function(int(self.rng.integers(blocks_range[0], blocks_range[1] + 1)),
                          block_len_range)
            for _ in range(max(n_clone, 2))
        ]
        records = []
        for i in range(n_clone):
            records.append({
                "id": f"clone_{i:06d}", "label": 1,
                "functions": [base[i], make_clone(base[i], self.rng, self.spec.registers)],
            })
        for i in range(n_other):
            a = int(self.rng.integers(len(base)))
            b = int(self.rng.integers(len(base)))
            while b == a:
                b = int(self.rng.integers(len(base)))
            records.append({
                "id": f"nonclone_{i:06d}", "label": -1,
                "functions": [base[a], base[b]],
            })
        order = self.rng.permutation(len(records))
        return [records[i] for i in order]

    # class profiles for labeled executables
    BENIGN_PATTERN_PROBS = (0.40, 0.10, 0.40, 0.10)
    MALICIOUS_PATTERN_PROBS = (0.10, 0.40, 0.10, 0.40)

    STRING_POOL = (
        ".text", ".data", ".rdata", ".rsrc", "kernel32.dll", "user32.dll",
        "Sleep", "Password", "GetLastError", "CreateFileA",
        "Microsoft Visual C++ Runtime Library", "Copyright (c) Example Corp",
        "Program Files", "config.ini", "SOFTWARE\\Classes\\CLSID",
        "http://update.example.com/check", "cmd.exe", "explorer.exe",
        "MessageBoxA", "GetModuleHandleA", "ntdll.dll", "wsprintfA",
    )
    BENIGN_STRING_WEIGHTS = (
        3, 3, 3, 2, 2, 2, 1, 0.1, 1, 1, 4, 4, 3, 2, 1, 0.3, 0.5, 1, 2, 2, 1, 1)
    MALICIOUS_STRING_WEIGHTS = (
        2, 2, 1, 1, 3, 1, 4, 3, 4, 3, 0.3, 0.2, 0.5, 1, 3, 3, 3, 2, 1, 2, 2, 1)

    IMPORT_POOL = (
        "kernel32.dll", "GetProcAddress", "LoadLibraryA", "ExitProcess",
        "user32.dll", "MessageBoxA", "LCMapStringW", "initterm", "msvcrt.dll",
        "free", "malloc", "gdi32.dll", "WriteFile", "CreateFileA",
        "VirtualAlloc", "GetLastError", "Sleep", "advapi32.dll",
        "RegSetValueExA", "RegOpenKeyExA", "ws2_32.dll", "send", "recv",
        "connect", "WinExec", "CreateRemoteThread",
    )
    BENIGN_IMPORT_WEIGHTS = (
        4, 4, 4, 4, 3, 3, 3, 3, 4, 3, 3, 2, 1, 1, 0.2, 1, 1, 1, 0.2, 0.5, 0.5,
        0.3, 0.3, 0.3, 0.05, 0.02)
    MALICIOUS_IMPORT_WEIGHTS = (
        4, 3, 3, 1, 1, 0.5, 0.2, 0.2, 1, 0.5, 0.5, 0.3, 4, 3, 4, 3, 4, 3,
        3, 3, 3, 3, 3, 3, 2, 2)

    def _weighted_tokens(self, pool, weights, count):
        probs = np.asarray(weights, dtype=np.float64)
        probs = probs / probs.sum()
        return [pool[int(i)] for i in self.rng.choice(len(pool), size=count, p=probs)]

    def _gibberish(self, count):
        alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
        out = []
        for _ in range(count):
            n = int(self.rng.integers(6, 13))
            out.append("".join(alphabet[int(i)] for i in self.rng.integers(0, len(alphabet), n)))
        return out

    def _header(self, malicious):
        rng = self.rng
        max_entropy = float(np.clip(rng.normal(7.1 if malicious else 5.9, 0.65), 0.5, 8.0))
        mean_entropy = float(np.clip(max_entropy - abs(rng.normal(0.8, 0.3)), 0.1, max_entropy))
        subsystem = int(rng.choice([1, 2, 3], p=[0.2, 0.45, 0.35] if malicious else [0.02, 0.78, 0.2]))
        os_major = int(rng.choice([1, 4, 5, 6, 10],
                                  p=[0.25, 0.3, 0.2, 0.15, 0.1] if malicious
                                  else [0.01, 0.04, 0.15, 0.5, 0.3]))
        size_of_code = int(rng.lognormal(9.0 if malicious else 10.5, 0.8)) & ~0xF
        n_sections = int(rng.integers(3, 10)) if malicious else int(rng.integers(4, 7))
        return {
            "Machine": 0x14C,
            "NumberOfSections": n_sections,
            "TimeDateStamp": int(rng.integers(1_000_000_000, 1_600_000_000)),
            "SizeOfOptionalHeader": 224,
            "Characteristics": int(rng.choice([0x102, 0x2102, 0x818E])),
            "MajorLinkerVersion": int(rng.choice([2, 5, 6, 8, 9]) if malicious
                                      else rng.choice([10, 11, 12, 14])),
            "MinorLinkerVersion": int(rng.integers(0, 30)),
            "SizeOfCode": size_of_code,
            "SizeOfInitializedData": int(rng.lognormal(9.5, 1.0)) & ~0xF,
            "SizeOfUninitializedData": int(rng.choice([0, 0, 0, 4096, 16384])),
            "AddressOfEntryPoint": int(rng.integers(0x1000, 0x9000)),
            "ImageBase": 0x400000,
            "SectionAlignment": 0x1000,
            "FileAlignment": 0x200,
            "MajorOperatingSystemVersion": os_major,
            "MinorOperatingSystemVersion": int(rng.integers(0, 4)),
            "MajorImageVersion": int(rng.integers(0, 7)),
            "MinorImageVersion": int(rng.integers(0, 10)),
            "MajorSubsystemVersion": int(rng.choice([4, 5, 6])),
            "SizeOfImage": size_of_code + int(rng.integers(0x2000, 0x20000)),
            "SizeOfHeaders": 0x400,
            "Checksum": int(rng.integers(0, 1 << 20)),
            "Subsystem": subsystem,
            "DllCharacteristics": int(rng.choice([0x0, 0x8140, 0x8540],
                                                 p=[0.6, 0.3, 0.1] if malicious
                                                 else [0.1, 0.5, 0.4])),
            "SizeOfStackReserve": 0x100000,
            "SizeOfStackCommit": 0x1000,
            "SizeOfHeapReserve": 0x100000,
            "SizeOfHeapCommit": 0x1000,
            "NumberOfRvaAndSizes": 16,
            "MeanSectionEntropy": round(mean_entropy, 4),
            "MaxSectionEntropy": round(max_entropy, 4),
        }

    def executable_record(self, index, malicious):
        rng = self.rng
        pattern_probs = self.MALICIOUS_PATTERN_PROBS if malicious else self.BENIGN_PATTERN_PROBS
        n_functions = int(rng.integers(2, 7))
        functions, names = [], []
        address = 0x401000 + int(rng.integers(0, 0x80)) * 16
        for _ in range(n_functions):
            n_blocks = int(rng.integers(2, 5))
            functions.append(self.function(n_blocks, (4, 10), pattern_probs))
            names.append(f"sub_{address:X}")
            address += int(rng.integers(0x10, 0x200)) & ~0xF
        if malicious:
            strings = self._weighted_tokens(self.STRING_POOL, self.MALICIOUS_STRING_WEIGHTS,
                                            int(rng.integers(2, 9)))
            strings += self._gibberish(int(rng.integers(2, 11)))
        else:
            strings = self._weighted_tokens(self.STRING_POOL, self.BENIGN_STRING_WEIGHTS,
                                            int(rng.integers(8, 19)))
            strings += self._gibberish(int(rng.integers(0, 3)))
        imports = self._weighted_tokens(
            self.IMPORT_POOL,
            self.MALICIOUS_IMPORT_WEIGHTS if malicious else self.BENIGN_IMPORT_WEIGHTS,
            int(rng.integers(2, 9)) if malicious else int(rng.integers(8, 19)))
        imports = sorted(set(imports), key=imports.index)  # an import table lists each once
        return {
            "id": f"exe_{index:06d}",
            "label": int(malicious),
            "functions": functions,
            "function_names": names,
            "strings": strings,
            "imports": imports,
            "header": self._header(malicious),
        }

    def executable_records(self, count):
        labels = np.zeros(count, dtype=int)
        labels[: count // 2] = 1
        self.rng.shuffle(labels)
        for i in range(count):
            yield self.executable_record(i, bool(labels[i]))


def build_assembly_vocabularies(spec: ToyIsaSpec | None = None):
    from .galaxy import Vocabulary

    spec = spec or ToyIsaSpec()
    return Vocabulary.from_tokens(spec.opcodes), Vocabulary.from_tokens(spec.operand_tokens())


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_corpus(out_dir, sizes: CorpusSizes | None = None, seed=0,
                    spec: ToyIsaSpec | None = None, mam_block_len=(5, 30)):
    """Write the three corpora, the vocabulary file, and a manifest; return the manifest."""
    from .galaxy import save_vocabularies

    sizes = sizes or CorpusSizes()
    sizes.validate()
    spec = spec or ToyIsaSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    gen = CorpusGenerator(spec, seed=seed)
    write_jsonl(out / "mam.jsonl", gen.mam_records(sizes.mam_blocks, mam_block_len))
    write_jsonl(out / "clone.jsonl", gen.clone_records(sizes.clone_pairs))
    write_jsonl(out / "executables.jsonl", gen.executable_records(sizes.executables))
    opcode_vocab, operand_vocab = build_assembly_vocabularies(spec)
    save_vocabularies(out / "vocab.json", opcode_vocab, operand_vocab)

    manifest = {
        "seed": int(seed),
        "sizes": dict(sizes.__dict__),
        "mam_block_len": list(mam_block_len),
        "files": {
            name: sha256_file(out / name)
            for name in ("mam.jsonl", "clone.jsonl", "executables.jsonl", "vocab.json")
        },
        "vocab_sizes": {"opcodes": len(opcode_vocab), "operands": len(operand_vocab)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest
