"""End-to-end detection: load a trained bundle, score inputs, explain them.

A detector is reconstructed from a final-stage checkpoint (which embeds the
model configuration, assembly vocabularies, feature schema, and standardizer
statistics).  It accepts either pre-extracted JSON records (with assembly
functions) or raw PE bytes; raw PE files carry no disassembly here, so their
code vector is the flagged all-zero vector and the static features do the
work, mirroring how packed binaries behave.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .features import (
    FeatureSchema,
    FeatureStandardizer,
    assemble_feature_vector,
    extract_printable_strings,
    import_tokens_from_pe,
)
from .galaxy import GalaxyConfig, GalaxyModel, Vocabulary, encode_tokens
from .iffnn import IffnnModel, attribute
from .pe import parse_pe


class Detector:
    """Frozen full-mode model bundle; thread-safe for inference."""

    def __init__(self, model: GalaxyModel, iffnn: IffnnModel, schema: FeatureSchema,
                 standardizer: FeatureStandardizer, top_k=5):
        self.model = model
        self.iffnn = iffnn
        self.schema = schema
        self.standardizer = standardizer
        self.top_k = top_k
        d = model.config.d_model
        self.expected_widths = (d, schema.str_width, schema.num_width, schema.imp_width)
        self.names = schema.names_with_code(d)

    @classmethod
    def load(cls, checkpoint_path, top_k=5):
        config, values = load_checkpoint(checkpoint_path)
        if config.get("stage") != "toplevel-full":
            raise CheckpointError(
                f"{checkpoint_path}: detection needs a 'toplevel-full' checkpoint, "
                f"found stage {config.get('stage')!r}")
        model = GalaxyModel(
            Vocabulary({t: int(i) for t, i in config["vocabularies"]["opcodes"].items()}),
            Vocabulary({t: int(i) for t, i in config["vocabularies"]["operands"].items()}),
            GalaxyConfig.from_dict(config["galaxy"]),
            seed=config.get("seed", 0),
        )
        model.load_parameters({k.removeprefix("galaxy."): v for k, v in values.items()
                               if k.startswith("galaxy.")})
        iffnn = IffnnModel(int(config["iffnn_input_dim"]),
                           hidden_dims=config["iffnn_hidden"], seed=0)
        iffnn.load_parameters({k.removeprefix("iffnn."): v for k, v in values.items()
                               if k.startswith("iffnn.")})
        schema = FeatureSchema.from_dict(config["feature_schema"])
        standardizer = FeatureStandardizer(log1p_columns=tuple(config["log1p_columns"]))
        standardizer.mean_ = values["standardizer.mean"]
        standardizer.scale_ = values["standardizer.scale"]
        detector = cls(model, iffnn, schema, standardizer, top_k=top_k)
        expected = model.config.d_model + schema.static_width
        if iffnn.input_dim != expected:
            raise CheckpointError(
                f"{checkpoint_path}: classifier width {iffnn.input_dim} does not match "
                f"feature schema width {expected}")
        return detector

    # -- feature assembly ----------------------------------------------------

    def _vectorize(self, strings, imports, header, code, function_names):
        with T.no_grad():
            encoded = self.model.encode_executable(code)
        raw_static = self.schema.static_vector(strings, imports, header)
        std_static = self.standardizer.transform(raw_static.reshape(1, -1))[0]
        d = self.model.config.d_model
        s, n, i = self.schema.str_width, self.schema.num_width, self.schema.imp_width
        fv = assemble_feature_vector(
            encoded.v_code.data.reshape(-1),
            std_static[:s], std_static[s : s + n], std_static[s + n :],
            names=self.names, expected_widths=self.expected_widths)
        raw_values = np.concatenate([np.zeros(d), raw_static])
        return fv, raw_values, encoded, function_names

    def detect_record(self, record, file_name=None):
        """Score one pre-extracted JSON record (see the corpus format)."""
        code = encode_tokens(record.get("functions", []),
                             self.model.opcode_vocab, self.model.operand_vocab)
        fv, raw_values, encoded, names = self._vectorize(
            record.get("strings", []), record.get("imports", []),
            record.get("header", {}), code, record.get("function_names"))
        return attribute(
            fv, self.iffnn,
            function_weights=encoded.function_weights,
            function_names=names,
            file_name=file_name or record.get("id", "<record>"),
            top_k=self.top_k,
            raw_values=raw_values,
            degenerate_code=encoded.degenerate)

    def detect_pe_bytes(self, data: bytes, file_name="<bytes>"):
        """Score raw PE bytes (static features only; no disassembly available)."""
        pe = parse_pe(data)
        code = encode_tokens([], self.model.opcode_vocab, self.model.operand_vocab)
        fv, raw_values, encoded, names = self._vectorize(
            extract_printable_strings(data), import_tokens_from_pe(pe),
            pe.header_fields, code, None)
        return attribute(
            fv, self.iffnn,
            function_weights=encoded.function_weights,
            function_names=names,
            file_name=file_name,
            top_k=self.top_k,
            raw_values=raw_values,
            degenerate_code=encoded.degenerate)

    # -- analysis glue ---------------------------------------------------------

    def static_matrix(self, records):
        return np.stack([
            self.schema.static_vector(r.get("strings", []), r.get("imports", []),
                                      r.get("header", {}))
            for r in records
        ])

    def attribution_counts(self, records, top_k=None):
        """How often each static feature lands among a record's top factors."""
        top_k = top_k or self.top_k
        counts = np.zeros(self.schema.static_width)
        code_width = self.model.config.d_model
        for record in records:
            report = self.detect_record(record)
            for factor in report.top_factors[:top_k]:
                if factor.description != "Assembly code":
                    counts[factor.index - code_width] += 1
        return counts
