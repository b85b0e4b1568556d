"""Hierarchical encoder for assembly code and its pre-training heads.

The code of an executable is modeled at three levels, each by its own
star-plus encoder stack:

    instructions -> basic block vector      (satellite-planet level)
    block vectors -> function vector        (planet-star level)
    function vectors -> executable vector   (star-galaxy level)

Every level outputs a d_model-wide relay vector, so the levels compose
without projection layers.  The instruction level embeds each instruction as
the concatenation of opcode and two operand embeddings (d_model/3 each) plus
a positional encoding.  Two training heads are attached: a masked-instruction
predictor (three softmax classifiers over the opcode/operand vocabularies)
and a cosine clone score between function vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import StarPlusEncoder, positional_encoding, positional_encoding_matrix
from .tensor import Initializer, Tensor

PAD_ID = 0
EMPTY_ID = 1
MASK_OPC_ID = 2
UNK_ID = 3

SPECIAL_TOKENS = {"PAD": PAD_ID, "EMPTY": EMPTY_ID, "MASK_OPC": MASK_OPC_ID, "UNK": UNK_ID}


class Vocabulary:
    """Bidirectional token<->id map with reserved special tokens.

    Ids 0..3 are PAD, EMPTY, MASK_OPC, UNK in every vocabulary; regular
    tokens start at id 4 in the order given.
    """

    def __init__(self, token_to_id: dict[str, int]):
        for token, wanted in SPECIAL_TOKENS.items():
            if token_to_id.get(token) != wanted:
                raise ValueError(f"vocabulary must reserve id {wanted} for {token}")
        self.token_to_id = dict(token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        if len(self.id_to_token) != len(self.token_to_id):
            raise ValueError("vocabulary ids must be unique")

    @classmethod
    def from_tokens(cls, tokens):
        mapping = dict(SPECIAL_TOKENS)
        next_id = len(SPECIAL_TOKENS)
        for token in tokens:
            if token not in mapping:
                mapping[token] = next_id
                next_id += 1
        return cls(mapping)

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def decode(self, idx):
        return self.id_to_token[idx]


def load_vocabularies(path):
    """Read the assembly vocabulary file: {"opcodes": {...}, "operands": {...}}."""
    raw = json.loads(Path(path).read_text())
    return Vocabulary(raw["opcodes"]), Vocabulary(raw["operands"])


def save_vocabularies(path, opcode_vocab, operand_vocab):
    payload = {"opcodes": opcode_vocab.token_to_id, "operands": operand_vocab.token_to_id}
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# assembly data model


@dataclass(frozen=True)
class Instruction:
    """One opcode and up to two operands, as vocabulary ids (EMPTY fills gaps)."""

    opcode_id: int
    operand1_id: int = EMPTY_ID
    operand2_id: int = EMPTY_ID


MASK_INSTRUCTION = Instruction(MASK_OPC_ID, EMPTY_ID, EMPTY_ID)


@dataclass(frozen=True)
class BasicBlock:
    instructions: tuple[Instruction, ...]

    def __post_init__(self):
        if len(self.instructions) < 1:
            raise ValueError("a basic block needs at least one instruction")

    def __len__(self):
        return len(self.instructions)

    def masked(self, position):
        """Copy with the instruction at ``position`` replaced by the mask triple."""
        if not 0 <= position < len(self.instructions):
            raise IndexError(f"mask position {position} out of range")
        ins = list(self.instructions)
        ins[position] = MASK_INSTRUCTION
        return BasicBlock(tuple(ins))


@dataclass(frozen=True)
class AssemblyFunction:
    blocks: tuple[BasicBlock, ...]

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ValueError("an assembly function needs at least one block")

    def __len__(self):
        return len(self.blocks)


@dataclass(frozen=True)
class ExecutableCode:
    functions: tuple[AssemblyFunction, ...]

    def __len__(self):
        return len(self.functions)


def encode_tokens(functions_tokens, opcode_vocab, operand_vocab):
    """Resolve nested [function][block][triple-of-strings] into the data model."""
    functions = []
    for func in functions_tokens:
        blocks = []
        for block in func:
            instructions = tuple(
                Instruction(
                    opcode_vocab.encode(triple[0]),
                    operand_vocab.encode(triple[1]) if len(triple) > 1 else EMPTY_ID,
                    operand_vocab.encode(triple[2]) if len(triple) > 2 else EMPTY_ID,
                )
                for triple in block
            )
            blocks.append(BasicBlock(instructions))
        functions.append(AssemblyFunction(tuple(blocks)))
    return ExecutableCode(tuple(functions))


# ---------------------------------------------------------------------------
# model


@dataclass
class GalaxyConfig:
    """Sizes for the three-level encoder; d_model must divide by 3 and by n_heads."""

    d_model: int = 96
    n_heads: int = 4
    d_ff: int = 384
    block_layers: int = 2
    function_layers: int = 2
    executable_layers: int = 2
    # three hidden layers keep the untrained head's logits small enough that
    # its initial loss sits at the uniform-prediction baseline
    mam_hidden_layers: int = 3
    scale: str = "d_model"      # softmax temperature: "d_model" or "d_k"
    boundary: str = "zero"      # neighbor padding: "zero" or "ring"
    max_block_len: int = 250
    max_clone_block_len: int = 50
    max_clone_blocks: int = 50

    def __post_init__(self):
        if self.d_model % 3 != 0:
            raise ValueError("d_model must be divisible by 3 (tripartite embedding)")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class MamHead:
    """Masked-instruction predictor: three classifiers on [block vec; masked slot].

    Each classifier is a small ReLU stack (two hidden layers of width d_model)
    ending in a softmax over its vocabulary.
    """

    def __init__(self, d_model, n_opcodes, n_operands, n_hidden_layers, init):
        self.d_model = d_model
        self.classifiers = []
        for n_classes in (n_opcodes, n_operands, n_operands):
            dims = [2 * d_model] + [d_model] * n_hidden_layers + [n_classes]
            layers = [
                (init.matrix(dims[i], dims[i + 1]), init.zeros((dims[i + 1],)))
                for i in range(len(dims) - 1)
            ]
            self.classifiers.append(layers)

    def logits(self, features):
        """Three logit rows for the opcode, first operand, and second operand."""
        outs = []
        for layers in self.classifiers:
            h = features
            for idx, (w, b) in enumerate(layers):
                h = T.add(T.matmul(h, w), b)
                if idx < len(layers) - 1:
                    h = T.relu(h)
            outs.append(h)
        return tuple(outs)

    def parameters(self, prefix=""):
        out = {}
        for ci, layers in enumerate(self.classifiers):
            for li, (w, b) in enumerate(layers):
                out[f"{prefix}c{ci}.w{li}"] = w
                out[f"{prefix}c{ci}.b{li}"] = b
        return out


@dataclass
class EncodedExecutable:
    """Executable-level code vector plus attribution metadata."""

    v_code: Tensor                      # 1 x d_model
    function_weights: np.ndarray | None  # per-function relay attention, summed over heads
    head_weights: np.ndarray | None = None  # raw top-layer relay attention, n_heads x n
    degenerate: bool = False            # True when there was no code to encode


class GalaxyModel:
    """Three-level star-plus hierarchy with masked-instruction and clone heads."""

    def __init__(self, opcode_vocab, operand_vocab, config: GalaxyConfig | None = None,
                 seed=0):
        self.config = config or GalaxyConfig()
        self.opcode_vocab = opcode_vocab
        self.operand_vocab = operand_vocab
        cfg = self.config
        init = Initializer(seed)
        d_tok = cfg.d_model // 3
        self.opcode_embedding = init.matrix(len(opcode_vocab), d_tok,
                                            shape=(len(opcode_vocab), d_tok))
        self.operand_embedding = init.matrix(len(operand_vocab), d_tok,
                                             shape=(len(operand_vocab), d_tok))
        common = dict(scale=cfg.scale, boundary=cfg.boundary)
        self.satellite_planet = StarPlusEncoder(
            cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.block_layers, init, **common)
        self.planet_star = StarPlusEncoder(
            cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.function_layers, init, **common)
        self.star_galaxy = StarPlusEncoder(
            cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.executable_layers, init, **common)
        self.mam_head = MamHead(cfg.d_model, len(opcode_vocab), len(operand_vocab),
                                cfg.mam_hidden_layers, init)
        self._pe_cache = {}

    # -- embeddings --------------------------------------------------------

    def _pe(self, n):
        if n not in self._pe_cache:
            self._pe_cache[n] = Tensor(positional_encoding_matrix(n, self.config.d_model))
        return self._pe_cache[n]

    def _embed_rows(self, instructions) -> Tensor:
        """Tripartite token embeddings, one row per instruction, before any PE."""
        opcodes = np.array([i.opcode_id for i in instructions])
        op1 = np.array([i.operand1_id for i in instructions])
        op2 = np.array([i.operand2_id for i in instructions])
        parts = [
            T.embedding_lookup(self.opcode_embedding, opcodes),
            T.embedding_lookup(self.operand_embedding, op1),
            T.embedding_lookup(self.operand_embedding, op2),
        ]
        return T.concat(parts, axis=1)

    def embed_instruction(self, instruction: Instruction, position: int) -> Tensor:
        """[opcode emb; operand1 emb; operand2 emb] + positional encoding."""
        pe_row = Tensor(positional_encoding(position, self.config.d_model)[None, :])
        return T.add(self._embed_rows([instruction]), pe_row)

    def embed_block(self, block: BasicBlock) -> Tensor:
        """Embed all instructions of a block as an (n x d_model) matrix."""
        return T.add(self._embed_rows(block.instructions), self._pe(len(block)))

    # -- encoders ----------------------------------------------------------

    def encode_block(self, block: BasicBlock):
        """Block relay vector (1 x d_model) and per-instruction outputs (n x d_model)."""
        if len(block) > self.config.max_block_len:
            raise ValueError(
                f"block has {len(block)} instructions, limit {self.config.max_block_len}")
        out = self.satellite_planet(self.embed_block(block))
        return out.relay, out.hidden

    def mam_predict(self, masked_block: BasicBlock, mask_position: int):
        """Categorical distributions (opcode, operand1, operand2) for the masked slot."""
        probs = tuple(T.softmax(l, axis=-1) for l in self._mam_logits(masked_block, mask_position))
        return probs

    def mam_loss(self, masked_block: BasicBlock, mask_position: int, original: Instruction):
        """Sum of the three cross-entropies against the original instruction."""
        lo, l1, l2 = self._mam_logits(masked_block, mask_position)
        loss = T.cross_entropy(lo, original.opcode_id)
        loss = T.add(loss, T.cross_entropy(l1, original.operand1_id))
        return T.add(loss, T.cross_entropy(l2, original.operand2_id))

    def _mam_logits(self, masked_block, mask_position):
        if not 0 <= mask_position < len(masked_block):
            raise IndexError(f"mask position {mask_position} out of range")
        if masked_block.instructions[mask_position] != MASK_INSTRUCTION:
            raise ValueError(f"no mask token at position {mask_position}")
        relay, hidden = self.encode_block(masked_block)
        slot = T.narrow(hidden, 0, mask_position, 1)
        return self.mam_head.logits(T.concat([relay, slot], axis=1))

    def encode_function(self, function: AssemblyFunction) -> Tensor:
        """Function relay vector from its block vectors (in positional order)."""
        block_vectors = [self.encode_block(b)[0] for b in function.blocks]
        stacked = T.add(T.concat(block_vectors, axis=0), self._pe(len(block_vectors)))
        return self.planet_star(stacked).relay

    def clone_score(self, f1: AssemblyFunction, f2: AssemblyFunction) -> Tensor:
        """Cosine similarity of the two function vectors (0.0 on zero-norm input)."""
        return T.cosine_similarity(self.encode_function(f1), self.encode_function(f2))

    def encode_executable(self, code: ExecutableCode) -> EncodedExecutable:
        """Executable vector plus per-function relay attention summed over heads.

        An executable with no functions (e.g. nothing could be disassembled)
        yields a flagged all-zero vector so downstream features still work.
        """
        if len(code.functions) == 0:
            return EncodedExecutable(
                v_code=Tensor(np.zeros((1, self.config.d_model))),
                function_weights=None,
                degenerate=True,
            )
        function_vectors = [self.encode_function(f) for f in code.functions]
        stacked = T.add(T.concat(function_vectors, axis=0), self._pe(len(function_vectors)))
        out = self.star_galaxy(stacked)
        per_head = out.relay_weights.data
        return EncodedExecutable(v_code=out.relay, function_weights=per_head.sum(axis=0),
                                 head_weights=per_head)

    # -- parameter management ----------------------------------------------

    def parameters(self):
        out = {
            "embed.opcode": self.opcode_embedding,
            "embed.operand": self.operand_embedding,
        }
        out.update(self.satellite_planet.parameters("satellite_planet."))
        out.update(self.planet_star.parameters("planet_star."))
        out.update(self.star_galaxy.parameters("star_galaxy."))
        out.update(self.mam_head.parameters("mam_head."))
        return out

    def component_parameters(self, component):
        """Parameters of one component: embeddings are part of satellite_planet."""
        if component == "satellite_planet":
            out = {
                "embed.opcode": self.opcode_embedding,
                "embed.operand": self.operand_embedding,
            }
            out.update(self.satellite_planet.parameters("satellite_planet."))
            return out
        if component == "planet_star":
            return self.planet_star.parameters("planet_star.")
        if component == "star_galaxy":
            return self.star_galaxy.parameters("star_galaxy.")
        if component == "mam_head":
            return self.mam_head.parameters("mam_head.")
        raise KeyError(component)

    def set_trainable(self, components, trainable):
        for component in components:
            for p in self.component_parameters(component).values():
                p.requires_grad = bool(trainable)

    def load_parameters(self, values: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
        for name, p in params.items():
            arr = values[name]
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model {p.data.shape}")
            p.data = arr.astype(np.float64).copy()
