"""Hierarchy-level checks: embeddings, block/function/executable encoders, heads."""

import numpy as np
import numpy.testing as npt
import pytest

import imad.tensor as T
from imad.attention import positional_encoding, positional_encoding_matrix
from imad.galaxy import (EMPTY_ID, MASK_INSTRUCTION, AssemblyFunction, BasicBlock,
                         ExecutableCode, GalaxyConfig, GalaxyModel, Instruction,
                         Vocabulary, encode_tokens)
from imad.tensor import Tensor


def _block(*triples):
    return BasicBlock(tuple(Instruction(*t) for t in triples))


class TestVocabulary:
    def test_specials_reserved(self):
        vocab = Vocabulary.from_tokens(["mov", "add"])
        assert vocab.encode("PAD") == 0
        assert vocab.encode("EMPTY") == 1
        assert vocab.encode("MASK_OPC") == 2
        assert vocab.encode("UNK") == 3
        assert vocab.encode("mov") == 4
        assert vocab.encode("never-seen") == 3  # UNK fallback
        assert vocab.decode(5) == "add"

    def test_reserved_ids_enforced(self):
        with pytest.raises(ValueError, match="reserve"):
            Vocabulary({"PAD": 1, "EMPTY": 0, "MASK_OPC": 2, "UNK": 3})

    def test_encode_tokens_structure(self, tiny_vocabs):
        opcodes, operands = tiny_vocabs
        code = encode_tokens(
            [[[["mov", "eax", "1"], ["ret", "EMPTY", "EMPTY"]]],
             [[["xor", "eax", "eax"]], [["push", "mystery", "EMPTY"]]]],
            opcodes, operands)
        assert len(code.functions) == 2
        assert len(code.functions[0].blocks[0]) == 2
        first = code.functions[0].blocks[0].instructions[0]
        assert first == Instruction(opcodes.encode("mov"), operands.encode("eax"),
                                    operands.encode("1"))
        assert code.functions[0].blocks[0].instructions[1].operand1_id == EMPTY_ID
        unk = code.functions[1].blocks[1].instructions[0]
        assert unk.operand1_id == 3  # unknown operand fell back to UNK


class TestDataModel:
    def test_empty_block_rejected(self):
        with pytest.raises(ValueError):
            BasicBlock(())

    def test_empty_function_rejected(self):
        with pytest.raises(ValueError):
            AssemblyFunction(())

    def test_masking(self):
        block = _block((4, 4, 5), (5, 6, 1))
        masked = block.masked(1)
        assert masked.instructions[1] == MASK_INSTRUCTION
        assert masked.instructions[0] == block.instructions[0]
        with pytest.raises(IndexError):
            block.masked(2)


class TestInstructionEmbedding:
    def test_zero_tables_give_pure_positional_encoding(self, tiny_model):
        tiny_model.opcode_embedding.data[:] = 0.0
        tiny_model.operand_embedding.data[:] = 0.0
        out = tiny_model.embed_instruction(Instruction(4, 4, 5), 0)
        npt.assert_allclose(out.data.reshape(-1),
                            positional_encoding(0, tiny_model.config.d_model))

    def test_opcode_only_affects_first_third(self, tiny_model):
        d = tiny_model.config.d_model
        a = tiny_model._embed_rows([Instruction(4, 4, 5)]).data
        b = tiny_model._embed_rows([Instruction(5, 4, 5)]).data
        assert np.abs(a[0, : d // 3] - b[0, : d // 3]).max() > 0
        npt.assert_array_equal(a[0, d // 3 :], b[0, d // 3 :])

    def test_table_lookup_oracle(self, tiny_model):
        """Concatenated table rows plus the positional row, read directly."""
        ins = Instruction(4, 5, 5)
        position = 2
        out = tiny_model.embed_instruction(ins, position)
        expected = np.concatenate([
            tiny_model.opcode_embedding.data[4],
            tiny_model.operand_embedding.data[5],
            tiny_model.operand_embedding.data[5],
        ]) + positional_encoding(position, tiny_model.config.d_model)
        npt.assert_allclose(out.data.reshape(-1), expected)

    def test_block_embedding_matches_per_instruction(self, tiny_model):
        block = _block((4, 4, 5), (5, 6, 7), (6, 8, 1))
        rows = tiny_model.embed_block(block).data
        for i, ins in enumerate(block.instructions):
            npt.assert_array_equal(rows[i],
                                   tiny_model.embed_instruction(ins, i).data[0])


class TestEncodeBlock:
    def test_output_shapes(self, tiny_model):
        relay, hidden = tiny_model.encode_block(_block((4, 4, 5), (5, 6, 1)))
        assert relay.shape == (1, 12)
        assert hidden.shape == (2, 12)

    def test_deterministic(self, tiny_model):
        block = _block((4, 4, 5), (5, 6, 1), (6, 7, 8))
        a, _ = tiny_model.encode_block(block)
        b, _ = tiny_model.encode_block(block)
        npt.assert_array_equal(a.data, b.data)

    def test_instruction_order_matters(self, tiny_model):
        """Positional encoding makes a swapped pair encode differently."""
        a, _ = tiny_model.encode_block(_block((4, 4, 5), (5, 6, 1), (6, 7, 8)))
        b, _ = tiny_model.encode_block(_block((5, 6, 1), (4, 4, 5), (6, 7, 8)))
        assert np.abs(a.data - b.data).max() > 1e-9

    def test_block_length_limit(self, tiny_vocabs):
        opcodes, operands = tiny_vocabs
        model = GalaxyModel(opcodes, operands,
                            GalaxyConfig(d_model=12, n_heads=2, d_ff=24,
                                         block_layers=1, function_layers=1,
                                         executable_layers=1, max_block_len=3),
                            seed=0)
        with pytest.raises(ValueError, match="limit"):
            model.encode_block(_block(*([(4, 4, 5)] * 4)))


class TestMaskedPrediction:
    def test_distributions_sum_to_one(self, tiny_model):
        block = _block((4, 4, 5), (5, 6, 1), (6, 7, 8))
        probs = tiny_model.mam_predict(block.masked(1), 1)
        assert probs[0].shape[-1] == len(tiny_model.opcode_vocab)
        assert probs[1].shape[-1] == len(tiny_model.operand_vocab)
        for p in probs:
            assert (p.data >= 0).all()
            npt.assert_allclose(p.data.sum(), 1.0, atol=1e-12)

    def test_requires_mask_token_at_position(self, tiny_model):
        block = _block((4, 4, 5), (5, 6, 1))
        with pytest.raises(ValueError, match="mask"):
            tiny_model.mam_predict(block, 0)
        with pytest.raises(IndexError):
            tiny_model.mam_predict(block.masked(1), 5)

    def test_loss_gradients_reach_all_components(self, tiny_model):
        """Trainability: one masked-prediction loss moves embeddings, the
        block encoder, and the prediction head."""
        block = _block((4, 4, 5), (5, 6, 1), (6, 7, 8))
        loss = tiny_model.mam_loss(block.masked(2), 2, block.instructions[2])
        loss.backward()
        groups = {
            "embeddings": [tiny_model.opcode_embedding, tiny_model.operand_embedding],
            "encoder": list(tiny_model.satellite_planet.parameters().values()),
            "head": list(tiny_model.mam_head.parameters().values()),
        }
        for name, tensors in groups.items():
            magnitude = max(
                (0.0 if p.grad is None else float(np.abs(p.grad).max()))
                for p in tensors)
            assert magnitude > 0, f"no gradient reached {name}"


class TestEncodeFunction:
    def test_matches_compositional_oracle(self, tiny_model):
        """encode_function == function-level encoder over the per-block vectors
        (plus positional rows), computed stepwise."""
        func = AssemblyFunction((
            _block((4, 4, 5), (5, 6, 1)),
            _block((6, 7, 8)),
            _block((7, 5, 5), (4, 8, 9), (5, 4, 4)),
        ))
        direct = tiny_model.encode_function(func)
        block_vectors = np.vstack(
            [tiny_model.encode_block(b)[0].data for b in func.blocks])
        stacked = block_vectors + positional_encoding_matrix(3, 12)
        expected = tiny_model.planet_star(Tensor(stacked)).relay
        npt.assert_allclose(direct.data, expected.data, atol=1e-12)

    def test_deterministic(self, tiny_model):
        func = AssemblyFunction((_block((4, 4, 5)), _block((5, 6, 1))))
        npt.assert_array_equal(tiny_model.encode_function(func).data,
                               tiny_model.encode_function(func).data)


class TestCloneScore:
    def test_self_score_is_one(self, tiny_model):
        func = AssemblyFunction((_block((4, 4, 5), (5, 6, 1)),))
        npt.assert_allclose(tiny_model.clone_score(func, func).item(), 1.0, atol=1e-9)

    def test_symmetry(self, tiny_model):
        f1 = AssemblyFunction((_block((4, 4, 5), (5, 6, 1)),))
        f2 = AssemblyFunction((_block((6, 7, 8)), _block((7, 5, 5))))
        npt.assert_allclose(tiny_model.clone_score(f1, f2).item(),
                            tiny_model.clone_score(f2, f1).item(), atol=1e-12)

    def test_loss_range(self, tiny_model, rng):
        """(cos - label)^2 lies in [0, 4] and is 0 only at the label."""
        for _ in range(10):
            f1 = AssemblyFunction((_block(
                (int(rng.integers(4, 9)), int(rng.integers(4, 10)), int(rng.integers(4, 10))),
                (int(rng.integers(4, 9)), int(rng.integers(4, 10)), int(rng.integers(4, 10))),
            ),))
            f2 = AssemblyFunction((_block(
                (int(rng.integers(4, 9)), int(rng.integers(4, 10)), int(rng.integers(4, 10))),
            ),))
            for label in (1.0, -1.0):
                loss = T.mse(tiny_model.clone_score(f1, f2), Tensor(label)).item()
                assert 0.0 <= loss <= 4.0


class TestEncodeExecutable:
    def test_single_function_weights_sum_to_head_count(self, tiny_model):
        code = ExecutableCode((AssemblyFunction((_block((4, 4, 5)),)),))
        encoded = tiny_model.encode_executable(code)
        assert not encoded.degenerate
        npt.assert_allclose(encoded.function_weights,
                            [tiny_model.config.n_heads], atol=1e-12)

    def test_weights_total_head_count(self, tiny_model):
        code = ExecutableCode((
            AssemblyFunction((_block((4, 4, 5)),)),
            AssemblyFunction((_block((5, 6, 1)), _block((6, 7, 8)))),
            AssemblyFunction((_block((7, 5, 5)),)),
        ))
        encoded = tiny_model.encode_executable(code)
        npt.assert_allclose(encoded.function_weights.sum(),
                            tiny_model.config.n_heads, atol=1e-9)
        assert (encoded.function_weights >= 0).all()

    def test_function_order_sensitivity(self, tiny_model):
        """Positional encoding at the executable level: reordering functions
        changes the code vector (order sensitivity is documented behavior)."""
        f1 = AssemblyFunction((_block((4, 4, 5)),))
        f2 = AssemblyFunction((_block((5, 6, 1)), _block((6, 7, 8))))
        a = tiny_model.encode_executable(ExecutableCode((f1, f2)))
        b = tiny_model.encode_executable(ExecutableCode((f2, f1)))
        assert np.abs(a.v_code.data - b.v_code.data).max() > 1e-9

    def test_empty_executable_degenerate(self, tiny_model):
        encoded = tiny_model.encode_executable(ExecutableCode(()))
        assert encoded.degenerate
        npt.assert_array_equal(encoded.v_code.data, np.zeros((1, 12)))
        assert encoded.function_weights is None


class TestParameterManagement:
    def test_every_level_output_width_composes(self, tiny_model):
        """Block, function, and executable vectors all share d_model width."""
        func = AssemblyFunction((_block((4, 4, 5)),))
        d = tiny_model.config.d_model
        assert tiny_model.encode_block(func.blocks[0])[0].shape == (1, d)
        assert tiny_model.encode_function(func).shape == (1, d)
        assert tiny_model.encode_executable(ExecutableCode((func,))).v_code.shape == (1, d)

    def test_set_trainable(self, tiny_model):
        tiny_model.set_trainable(["satellite_planet", "planet_star"], False)
        assert not tiny_model.opcode_embedding.requires_grad
        assert all(not p.requires_grad
                   for p in tiny_model.planet_star.parameters().values())
        assert all(p.requires_grad
                   for p in tiny_model.star_galaxy.parameters().values())
        tiny_model.set_trainable(["satellite_planet", "planet_star"], True)
        assert tiny_model.opcode_embedding.requires_grad

    def test_parameter_roundtrip(self, tiny_vocabs, tmp_path):
        from imad.checkpoint import load_checkpoint, save_checkpoint

        opcodes, operands = tiny_vocabs
        config = GalaxyConfig(d_model=12, n_heads=2, d_ff=24, block_layers=1,
                              function_layers=1, executable_layers=1)
        source = GalaxyModel(opcodes, operands, config, seed=3)
        target = GalaxyModel(opcodes, operands, config, seed=4)
        block = _block((4, 4, 5), (5, 6, 1))
        assert not np.array_equal(
            source.encode_block(block)[0].data, target.encode_block(block)[0].data)

        path = tmp_path / "galaxy.ckpt"
        save_checkpoint(path, {"stage": "test"}, source.parameters())
        _, values = load_checkpoint(path)
        target.load_parameters(values)
        npt.assert_array_equal(source.encode_block(block)[0].data,
                               target.encode_block(block)[0].data)

    def test_config_validation(self, tiny_vocabs):
        with pytest.raises(ValueError, match="divisible by 3"):
            GalaxyConfig(d_model=10, n_heads=2)
        with pytest.raises(ValueError, match="n_heads"):
            GalaxyConfig(d_model=9, n_heads=2)
