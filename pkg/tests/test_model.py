"""Student/teacher model contracts: predictions, EMA, init, checkpointing."""

import hashlib
import math

import numpy as np
import pytest

from ensdistill import tensor as td
from ensdistill.errors import CheckpointFormatError, ShapeError
from ensdistill.measures import entropy_from_logs
from ensdistill.model import (
    ModelDims,
    TeacherState,
    ema_update,
    encode,
    head_logits,
    init_params,
    load_checkpoint,
    param_tensors,
    save_checkpoint,
    student_logprobs,
    teacher_logprobs,
)

SMALL = ModelDims(input_dim=8, repr_dim=6, embed_dim=6, codebook_size=5, heads=3,
                  encoder_hidden=(6,), head_hidden=(6,))


def _batch(n=4, d=8, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


class TestStudentPredictions:
    def test_rows_normalized_for_any_params(self):
        for seed in range(5):
            params = init_params(seed, SMALL)
            lp = student_logprobs(_batch(seed=seed), params, j=seed % 3, tau_s=0.1)
            lse = np.log(np.exp(lp.data).sum(axis=1))
            assert np.max(np.abs(lse)) < 1e-12

    def test_identical_codes_give_uniform(self):
        params = init_params(1, SMALL)
        params.tensors["code.0"][:] = params.tensors["code.0"][0]
        lp = student_logprobs(_batch(), params, j=0, tau_s=0.1)
        np.testing.assert_allclose(np.exp(lp.data), 1.0 / SMALL.codebook_size, atol=1e-12)

    def test_high_temperature_approaches_uniform(self):
        params = init_params(2, SMALL)
        lp = student_logprobs(_batch(), params, j=0, tau_s=1e9)
        np.testing.assert_allclose(np.exp(lp.data), 1.0 / SMALL.codebook_size, atol=1e-9)

    def test_temperature_monotonicity(self):
        """Lowering tau strictly lowers prediction entropy on non-degenerate logits."""
        params = init_params(3, SMALL)
        x = _batch(seed=3)
        entropies = [
            entropy_from_logs(student_logprobs(x, params, 0, tau).data).mean()
            for tau in (0.05, 0.1, 0.5, 2.0)
        ]
        assert all(a < b for a, b in zip(entropies, entropies[1:]))

    def test_scalar_oracle_for_cosine_softmax(self):
        """Hand-built embedding/codebook against a scalar-by-scalar evaluation."""
        emb = np.array([[1.0, 2.0], [-0.5, 0.3]])
        codebook = np.array([[0.0, 1.0], [2.0, 2.0], [-1.0, 4.0]])
        tau = 0.3
        emb_t = td.row_l2_normalize(td.const(emb))
        code_t = td.row_l2_normalize(td.const(codebook))
        lp = td.log_softmax_rows(td.matmul(emb_t, td.transpose(code_t)), temperature=tau).data
        for i in range(2):
            logits = []
            for y in range(3):
                dot = sum(emb[i, k] * codebook[y, k] for k in range(2))
                cos = dot / (math.hypot(*emb[i]) * math.hypot(*codebook[y]))
                logits.append(cos / tau)
            z = max(logits)
            denom = sum(math.exp(l - z) for l in logits)
            for y in range(3):
                expected = (logits[y] - z) - math.log(denom)
                assert abs(lp[i, y] - expected) < 1e-12


class TestTeacherPredictions:
    def test_matches_student_when_params_and_tau_agree(self):
        params = init_params(4, SMALL)
        teacher = TeacherState.from_student(params)
        x = _batch(seed=4)
        sp = student_logprobs(x, params, j=1, tau_s=0.07)
        tp = teacher_logprobs(x, teacher, j=1, tau_t=0.07, renorm="none")
        np.testing.assert_allclose(tp.data, sp.data, atol=1e-12)

    def test_output_carries_zero_gradient(self):
        params = init_params(5, SMALL)
        teacher = TeacherState.from_student(params)
        tp = teacher_logprobs(_batch(seed=5), teacher, j=0, tau_t=0.05, renorm="sinkhorn")
        assert not tp.requires_grad

    def test_loss_through_teacher_gives_zero_teacher_grads(self):
        """Full pipeline: teacher branches contribute value, never gradient."""
        params = init_params(6, SMALL)
        x = _batch(seed=6)
        t_leaves = param_tensors(params, trainable=True)
        zt = encode(x, t_leaves, SMALL)
        t_lp = td.stop_gradient(td.log_softmax_rows(head_logits(zt, t_leaves, SMALL, 0), 0.05))

        s_leaves = {k: td.leaf("s_" + k, v) for k, v in params.tensors.items()}
        zs = encode(x, s_leaves, SMALL)
        s_lp = td.log_softmax_rows(head_logits(zs, s_leaves, SMALL, 0), 0.1)
        loss = td.scale(td.tsum(td.mul(td.exp(t_lp), s_lp)), -1.0)
        grads = td.backward(loss, leaves=list(t_leaves.values()) + list(s_leaves.values()))
        for name in params.tensors:
            np.testing.assert_array_equal(grads[name], np.zeros_like(params.tensors[name]))
        assert any(np.any(grads["s_" + name] != 0.0) for name in params.tensors)

    def test_sinkhorn_renorm_fixes_uniform_predictions(self):
        params = init_params(7, SMALL)
        for j in range(SMALL.heads):
            params.tensors[f"code.{j}"][:] = params.tensors[f"code.{j}"][0]
        teacher = TeacherState.from_student(params)
        tp = teacher_logprobs(_batch(seed=7), teacher, j=0, tau_t=0.05, renorm="sinkhorn")
        np.testing.assert_allclose(np.exp(tp.data), 1.0 / SMALL.codebook_size, atol=1e-12)


class TestEmaUpdate:
    def test_eta_one_is_bitexact_noop(self):
        teacher = TeacherState.from_student(init_params(8, SMALL))
        student = init_params(9, SMALL)
        before = {k: v.copy() for k, v in teacher.params.tensors.items()}
        ema_update(teacher, student, eta=1.0)
        for k, v in teacher.params.tensors.items():
            assert np.array_equal(v, before[k])

    def test_eta_zero_is_bitexact_copy(self):
        teacher = TeacherState.from_student(init_params(10, SMALL))
        student = init_params(11, SMALL)
        ema_update(teacher, student, eta=0.0)
        for k, v in teacher.params.tensors.items():
            assert np.array_equal(v, student.tensors[k])

    def test_scalar_momentum_value(self):
        teacher = TeacherState.from_student(init_params(12, SMALL))
        student = init_params(12, SMALL)
        teacher.params.tensors["code.0"][:] = 1.0
        student.tensors["code.0"][:] = 0.0
        ema_update(teacher, student, eta=0.996)
        assert teacher.params.tensors["code.0"][0, 0] == pytest.approx(0.996, abs=1e-15)

    def test_contraction(self):
        """Distance to a fixed student never grows under repeated updates."""
        teacher = TeacherState.from_student(init_params(13, SMALL))
        student = init_params(14, SMALL)
        dist = lambda: sum(  # noqa: E731
            float(np.abs(teacher.params.tensors[k] - student.tensors[k]).sum())
            for k in student.tensors
        )
        prev = dist()
        for _ in range(5):
            ema_update(teacher, student, eta=0.9)
            cur = dist()
            assert cur <= prev + 1e-12
            prev = cur

    def test_shape_mismatch(self):
        teacher = TeacherState.from_student(init_params(15, SMALL))
        other = init_params(15, ModelDims(input_dim=8, repr_dim=6, embed_dim=6,
                                          codebook_size=7, heads=3,
                                          encoder_hidden=(6,), head_hidden=(6,)))
        with pytest.raises(ShapeError):
            ema_update(teacher, other, eta=0.5)

    def test_bad_eta(self):
        teacher = TeacherState.from_student(init_params(16, SMALL))
        with pytest.raises(ValueError):
            ema_update(teacher, teacher.params, eta=1.5)


class TestInitParams:
    def test_deterministic(self):
        a = init_params(17, SMALL)
        b = init_params(17, SMALL)
        for k in a.tensors:
            assert np.array_equal(a.tensors[k], b.tensors[k])

    def test_heads_differ(self):
        p = init_params(18, SMALL)
        assert np.max(np.abs(p.tensors["head.0.0.w"] - p.tensors["head.1.0.w"])) > 0.0
        assert np.max(np.abs(p.tensors["code.0"] - p.tensors["code.1"])) > 0.0

    def test_paper_scale_allocation(self):
        dims = ModelDims(input_dim=32, repr_dim=32, embed_dim=256, codebook_size=1024,
                         heads=16, encoder_hidden=(64,), head_hidden=(64,))
        p = init_params(0, dims)
        assert p.tensors["code.15"].shape == (1024, 256)

    def test_encoder_gradient_sums_over_heads(self):
        """Dropping one head's loss term strictly changes the encoder gradient."""
        params = init_params(19, SMALL)
        x = _batch(seed=19)

        def encoder_grad(head_subset):
            leaves = param_tensors(params, trainable=True)
            z = encode(x, leaves, SMALL)
            parts = [
                td.tsum(td.log_softmax_rows(head_logits(z, leaves, SMALL, j), 0.1))
                for j in head_subset
            ]
            total = parts[0]
            for p in parts[1:]:
                total = td.add(total, p)
            return td.backward(total)["enc.0.w"]

        g_all = encoder_grad([0, 1, 2])
        g_drop = encoder_grad([0, 1])
        assert np.max(np.abs(g_all - g_drop)) > 1e-12


class TestCheckpoint:
    def _roundtrip_paths(self, tmp_path):
        return tmp_path / "a.ensd", tmp_path / "b.ensd"

    def test_save_load_save_byte_identical(self, tmp_path):
        params = init_params(20, SMALL)
        teacher = TeacherState.from_student(params)
        p1, p2 = self._roundtrip_paths(tmp_path)
        save_checkpoint(params, teacher, 3, p1, scheme="Ent", seeds={"init": 20})
        s, t, header = load_checkpoint(p1)
        save_checkpoint(s, t, header["step"], p2, scheme=header["scheme"],
                        seeds=header["seeds"])
        assert hashlib.sha256(p1.read_bytes()).digest() == hashlib.sha256(p2.read_bytes()).digest()

    def test_metadata_round_trip(self, tmp_path):
        params = init_params(21, SMALL)
        teacher = TeacherState.from_student(params)
        path = tmp_path / "c.ensd"
        save_checkpoint(params, teacher, 77, path, scheme="Prob", seeds={"init": 21})
        _, _, header = load_checkpoint(path)
        assert header["step"] == 77
        assert header["scheme"] == "Prob"
        assert header["m"] == SMALL.heads and header["c"] == SMALL.codebook_size

    def test_f32_precision(self, tmp_path):
        params = init_params(22, SMALL)
        params.tensors["code.0"][0, 0] = 1.0 / 3.0
        teacher = TeacherState.from_student(params)
        path = tmp_path / "d.ensd"
        save_checkpoint(params, teacher, 0, path)
        s, _, _ = load_checkpoint(path)
        rel = abs(s.tensors["code.0"][0, 0] - 1.0 / 3.0) / (1.0 / 3.0)
        assert rel < 1e-7

    def test_corrupted_magic(self, tmp_path):
        params = init_params(23, SMALL)
        teacher = TeacherState.from_student(params)
        path = tmp_path / "e.ensd"
        save_checkpoint(params, teacher, 0, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        params = init_params(24, SMALL)
        teacher = TeacherState.from_student(params)
        path = tmp_path / "f.ensd"
        save_checkpoint(params, teacher, 0, path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        params = init_params(25, SMALL)
        teacher = TeacherState.from_student(params)
        path = tmp_path / "g.ensd"
        save_checkpoint(params, teacher, 0, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)
