import numpy as np
import pytest

from ccdm.corpus import tokenize
from ccdm.model import DiffusionModel, ModelConfig, select_params
from ccdm.numerics import Rng, Tensor, backward, no_grad, tmean


@pytest.fixture(scope="module")
def model():
    return DiffusionModel(ModelConfig(), seed=0)


def closed_form_counts(c: ModelConfig) -> dict:
    """Independent audit of per-kind denoiser parameter counts from the layer list."""
    d = c.embed_dim
    attn_w = 4 * d * d
    attn_b = 4 * d
    per_block = {
        "weight": 2 * attn_w + d * c.mlp_hidden + c.mlp_hidden * d,
        "bias": 2 * attn_b + c.mlp_hidden + d,
        "norm_scale": 3 * d,
        "norm_bias": 3 * d,
    }
    counts = {k: v * c.blocks for k, v in per_block.items()}
    counts["weight"] += (c.patch_dim * d                      # patch embed
                         + c.time_embed_dim * c.time_mlp_hidden
                         + c.time_mlp_hidden * d              # time mlp
                         + d * c.patch_dim)                   # out proj
    counts["bias"] += d + c.time_mlp_hidden + d + c.patch_dim
    counts["norm_scale"] += d                                 # final ln
    counts["norm_bias"] += d
    counts["embedding"] = c.tokens * d                        # positions
    return counts


class TestRegistry:
    def test_paths_unique_and_tagged(self, model):
        paths = model.registry.paths()
        assert len(paths) == len(set(paths))
        for e in model.registry:
            assert e.tensor.name == e.path

    def test_partition_sums_to_total(self, model):
        total = model.registry.total_params()
        by_kind = {}
        for e in model.registry:
            by_kind[e.kind] = by_kind.get(e.kind, 0) + e.size
        assert "adapter" not in by_kind
        assert sum(by_kind.values()) == total

    def test_denoiser_counts_match_closed_form(self, model):
        c = model.config
        expected = closed_form_counts(c)
        for kind, want in expected.items():
            got = sum(e.size for e in model.registry
                      if e.site != "text_encoder" and e.kind == kind)
            assert got == want, f"kind={kind}: got {got}, closed form {want}"

    def test_bias_count_closed_form(self, model):
        bias = select_params(model.registry,
                             lambda e: e.kind == "bias" and e.site != "text_encoder")
        assert sum(e.size for e in bias) == closed_form_counts(model.config)["bias"]

    def test_select_false_and_true_predicates(self, model):
        assert select_params(model.registry, lambda e: False) == []
        everything = select_params(model.registry, lambda e: True)
        assert sum(e.size for e in everything) == model.registry.total_params()

    def test_select_preserves_order_and_disjointness(self, model):
        order = model.registry.paths()
        attn = select_params(model.registry, lambda e: e.site == "self_attn")
        idx = [order.index(e.path) for e in attn]
        assert idx == sorted(idx)
        bias = {e.path for e in select_params(model.registry, lambda e: e.kind == "bias")}
        norm = {e.path for e in select_params(model.registry,
                                              lambda e: e.kind.startswith("norm"))}
        assert not bias & norm


class TestTextEncoder:
    def test_empty_caption_is_fixed(self, model):
        with no_grad():
            a = model.encode_caption([])
            b = model.encode_caption([])
        assert a.is_empty and b.is_empty
        assert np.array_equal(a.data.data, b.data.data)

    def test_all_pad_equals_empty(self, model):
        with no_grad():
            a = model.encode_caption([])
            b = model.encode_caption([0, 0, 0])
        assert b.is_empty
        assert np.allclose(a.data.data, b.data.data, atol=1e-6)

    def test_deterministic(self, model):
        ids = tokenize("large circle bright at center")
        with no_grad():
            a = model.encode_caption(ids)
            b = model.encode_caption(ids)
        assert np.array_equal(a.data.data, b.data.data)
        assert not a.is_empty

    def test_one_token_difference_changes_embedding(self, model):
        with no_grad():
            a = model.encode_caption(tokenize("large circle bright at center"))
            b = model.encode_caption(tokenize("small circle bright at center"))
        assert np.linalg.norm(a.data.data - b.data.data) > 0

    def test_id_out_of_range(self, model):
        with pytest.raises(ValueError):
            model.encode_caption([model.config.vocab_size])

    def test_too_long(self, model):
        with pytest.raises(ValueError):
            model.encode_caption([1] * (model.config.caption_len + 1))


class TestDenoiser:
    def test_output_shape_is_image_shape(self, model):
        x = Rng(0, "x").normal((1, 32, 32))
        with no_grad():
            e = model.encode_caption(tokenize("small square dim at top"))
            out = model.denoise(x, 5, e)
        assert out.shape == (1, 32, 32)

    def test_deterministic(self, model):
        x = Rng(1, "x").normal((1, 32, 32))
        with no_grad():
            e = model.encode_caption(tokenize("large cross striped at left"))
            a = model.denoise(x, 17, e)
            b = model.denoise(x, 17, e)
        assert np.array_equal(a.data, b.data)

    def test_timestep_out_of_range(self, model):
        x = Rng(2, "x").normal((1, 32, 32))
        with no_grad():
            e = model.encode_caption([])
            with pytest.raises(ValueError, match="timestep"):
                model.denoise(x, model.timesteps, e)
            with pytest.raises(ValueError, match="timestep"):
                model.denoise(x, -1, e)

    def test_batch_matches_single(self, model):
        rng = Rng(3, "x")
        xs = rng.normal((3, 1, 32, 32))
        ts = np.array([0, 7, 199])
        with no_grad():
            e = model.encode_caption(tokenize("small triangle bright at right"))
            batch_e = Tensor(np.repeat(e.data.data[None], 3, axis=0))
            out = model.denoise_batch(xs, ts, batch_e)
            for i in range(3):
                single = model.denoise(xs[i], int(ts[i]), e)
                assert np.allclose(out.data[i], single.data, atol=2e-6)

    def test_gradient_wrt_prompt_embedding_matches_fd(self, model):
        # required by threshold mitigation: d mean(denoise) / d e
        rng = Rng(4, "fd")
        x = rng.normal((1, 32, 32))
        ids = tokenize("large circle dim at bottom")
        with no_grad():
            e0 = model.encode_caption(ids).data.data.copy()
        e = Tensor(e0, requires_grad=True, name="e")
        loss = tmean(model.denoise(x, 3, type("E", (), {"data": e, "is_empty": False})()))
        grads = backward(loss)
        g = grads["e"].data
        h = 1e-2
        for (i, j) in [(0, 5), (3, 40), (7, 63)]:
            ep = e0.copy(); ep[i, j] += h
            em = e0.copy(); em[i, j] -= h
            with no_grad():
                fp = float(tmean(model.denoise(x, 3, type("E", (), {
                    "data": Tensor(ep), "is_empty": False})())).data)
                fm = float(tmean(model.denoise(x, 3, type("E", (), {
                    "data": Tensor(em), "is_empty": False})())).data)
            fd = (fp - fm) / (2 * h)
            assert abs(fd - g[i, j]) / max(abs(fd), abs(g[i, j]), 1e-3) < 1e-2

    def test_conditioning_pathway_is_live_at_init(self, model):
        # prerequisite for the prediction-gap detector being meaningful
        rng = Rng(5, "cond")
        with no_grad():
            e_p = model.encode_caption(tokenize("large square bright at center"))
            e_0 = model.encode_caption([])
            changed = 0
            for k in range(20):
                x = rng.normal((1, 32, 32))
                a = model.denoise(x, 10, e_p)
                b = model.denoise(x, 10, e_0)
                if not np.allclose(a.data, b.data):
                    changed += 1
        assert changed == 20
