import numpy as np
import pytest

from molchannel import autodiff as ad
from molchannel.checks import jittered, random_rotation
from molchannel.data import SyntheticSpec, gen_synthetic
from molchannel.encodings3d import distance_bias
from molchannel.model import Model, ModelConfig, attention_matrix, input_fusion, parameter_shapes
from molchannel.molecule import ALL_MODES, Mode, ModeError, Molecule


def synth(cfg, n=6, seed=0, **kw):
    spec = SyntheticSpec(atom_vocab=cfg.atom_vocab, edge_vocab=cfg.edge_vocab, **kw)
    return gen_synthetic(n, np.random.default_rng(seed), spec)


def zero_structural(model):
    for name in ("pseudo_bias", "spd_table", "edge_weights", "degree_table", "gbf.w2", "gbf.w3"):
        model.params[name].data[:] = 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(layers=0)
    with pytest.raises(ValueError):
        ModelConfig(denoise_heads="sum")
    cfg = ModelConfig()
    assert cfg.head_dim * cfg.heads == cfg.dim
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_enumeration_is_stable(small_config):
    a = Model(small_config, rng=np.random.default_rng(0)).params
    b = Model(small_config, rng=np.random.default_rng(1)).params
    assert a.names == b.names == list(parameter_shapes(small_config))
    offsets = a.offsets()
    assert offsets[a.names[0]][0] == 0
    assert offsets[a.names[-1]][1] == a.size == a.flat().size
    vec = np.arange(a.size, dtype=float)
    a.load_flat(vec)
    assert np.array_equal(a.flat(), vec)


def test_desk_scale_parameter_count():
    assert Model(ModelConfig()).params.size == 141_023


def test_structural_tables_start_at_zero(small_config):
    p = Model(small_config).params
    for name in ("spd_table", "edge_weights", "degree_table", "pseudo_bias"):
        assert not p[name].data.any()


def test_mode2d_ignores_coordinates(small_config):
    model = Model(small_config, rng=np.random.default_rng(0))
    jit = jittered(model, 0.3)
    m = synth(small_config, 1)[0]
    base = input_fusion(jit, m, Mode.MODE_2D).data
    reps, s = jit.forward(m, Mode.MODE_2D)
    for variant in (m.with_coords(None), m.with_coords(np.random.default_rng(3).normal(size=(m.n_atoms, 3)))):
        assert np.array_equal(input_fusion(jit, variant, Mode.MODE_2D).data, base)
        r2, s2 = jit.forward(variant, Mode.MODE_2D)
        assert r2.data.tobytes() == reps.data.tobytes() and s2.data.tobytes() == s.data.tobytes()


def test_mode3d_ignores_bonds(small_config):
    jit = jittered(Model(small_config, rng=np.random.default_rng(0)), 0.3)
    m = synth(small_config, 1)[0]
    base = input_fusion(jit, m, Mode.MODE_3D).data
    reps, s = jit.forward(m, Mode.MODE_3D)
    other = m.with_bonds([(0, k, (1,)) for k in range(1, m.n_atoms)])
    assert np.array_equal(input_fusion(jit, other, Mode.MODE_3D).data, base)
    r2, s2 = jit.forward(other, Mode.MODE_3D)
    assert r2.data.tobytes() == reps.data.tobytes() and s2.data.tobytes() == s.data.tobytes()


def test_zeroed_tables_two_atoms_give_raw_embeddings(small_config):
    model = Model(small_config, rng=np.random.default_rng(0))
    zero_structural(model)
    m = Molecule(((1, 2), (3, 0)), ((0, 1, (2,)),), coords=[[0, 0, 0], [1.1, 0, 0]])
    x0 = input_fusion(model, m, Mode.MODE_2D3D).data
    p = model.params
    assert np.array_equal(x0[0], p["pseudo_atom"].data)
    assert np.array_equal(x0[1], p["atom_emb.0"].data[1] + p["atom_emb.1"].data[2])
    assert np.array_equal(x0[2], p["atom_emb.0"].data[3] + p["atom_emb.1"].data[0])


def test_zeroed_tables_collapse_modes(small_config):
    model = jittered(Model(small_config, rng=np.random.default_rng(0)), 0.3)
    zero_structural(model)
    m = synth(small_config, 1)[0]
    outs = [model.forward(m, mode) for mode in ALL_MODES]
    for reps, s in outs[1:]:
        assert reps.data.tobytes() == outs[0][0].data.tobytes()
        assert s.data.tobytes() == outs[0][1].data.tobytes()


def test_zero_weights_give_uniform_attention(small_config):
    model = Model(small_config)
    for name in model.params.names:
        if name != "gbf.sigma":     # the kernel width must stay nonzero
            model.params[name].data[:] = 0.0
    m = synth(small_config, 1)[0]
    a = attention_matrix(model, m, Mode.MODE_2D3D, 0, 1)
    assert np.allclose(a, 1.0 / (m.n_atoms + 1), atol=0, rtol=1e-15)


def test_attention_rows_sum_to_one_with_padding(small_config):
    model = jittered(Model(small_config), 0.3)
    mols = synth(small_config, 4)
    out = model.forward_batch(mols, [Mode.MODE_2D3D] * 4)
    for logits in out.logits:
        probs = ad.softmax_rows(logits).data
        assert np.abs(probs.sum(-1) - 1).max() < 1e-12
        for k, m in enumerate(mols):
            assert not probs[k, :, :, m.n_atoms + 1:].any()


def test_softmax_row_shift_invariance(small_config):
    model = jittered(Model(small_config), 0.3)
    m = synth(small_config, 1)[0]
    out = model.forward_batch([m], [Mode.MODE_2D])
    logits = out.logits[0].data.copy()
    shifted = logits.copy()
    shifted[0, 0, 2] += 7.25
    assert np.allclose(ad.softmax_rows(ad.Tensor(shifted)).data, ad.softmax_rows(ad.Tensor(logits)).data,
                       atol=1e-15)


def test_mode2d_and_mode2d3d_logits_differ_by_distance_bias(small_config):
    model = jittered(Model(small_config), 0.3)
    m = synth(small_config, 1)[0]
    c2 = model.collate([m], [Mode.MODE_2D])
    c23 = model.collate([m], [Mode.MODE_2D3D])
    x = ad.layer_norm(model.input_fusion(c23), model.params["layers.0.ln1.gain"], model.params["layers.0.ln1.bias"])
    diff = (model.attention_logits(x, 0, model.structural_bias(c23), c23).data
            - model.attention_logits(x, 0, model.structural_bias(c2), c2).data)
    phi = distance_bias(model.gbf(c23), model.params.gbf).data * c23.atom_pair[:, None]
    assert np.allclose(diff, phi, atol=1e-13)
    assert not diff[..., 0, :].any() and not diff[..., :, 0].any()


def test_batched_forward_matches_single(small_config):
    model = jittered(Model(small_config), 0.3)
    mols = synth(small_config, 5)
    modes = [Mode.MODE_2D, Mode.MODE_3D, Mode.MODE_2D3D, Mode.MODE_3D, Mode.MODE_2D]
    out = model.forward_batch(mols, modes)
    for k, (m, mode) in enumerate(zip(mols, modes)):
        reps, s = model.forward(m, mode)
        assert np.allclose(out.atom_reps.data[k, : m.n_atoms + 1], reps.data, atol=1e-12)
        assert abs(out.scalar.data[k] - s.data) < 1e-12


def test_forward_permutation_equivariant(small_config):
    model = jittered(Model(small_config), 0.3)
    rng = np.random.default_rng(8)
    for m in synth(small_config, 5, bond_density=0.0):
        perm = rng.permutation(m.n_atoms)
        for mode in ALL_MODES:
            reps, s = model.forward(m, mode)
            reps_p, s_p = model.forward(m.permuted(perm), mode)
            assert np.abs(reps_p.data - reps.data[np.concatenate([[0], perm + 1])]).max() < 1e-9
            assert abs(s_p.data - s.data) < 1e-9


def test_mode_errors(small_config):
    model = Model(small_config)
    m = synth(small_config, 1)[0]
    with pytest.raises(ModeError):
        model.forward(m.with_coords(None), Mode.MODE_3D)
    with pytest.raises(ModeError):
        model.forward(m.with_bonds([]), Mode.MODE_2D3D)
    out = model.forward_batch([m], [Mode.MODE_2D])
    with pytest.raises(ModeError):
        model.denoise_head(out)


def test_vocab_mismatch_rejected(small_config):
    model = Model(small_config)
    with pytest.raises(ValueError, match="vocabulary"):
        model.forward(Molecule(((99, 0), (0, 0)), ((0, 1, (0,)),)), Mode.MODE_2D)


@pytest.mark.parametrize("heads_mode", ["mean", "split"])
def test_denoise_head_equivariance(small_config, heads_mode):
    cfg = ModelConfig(**{**small_config.to_dict(), "denoise_heads": heads_mode})
    model = jittered(Model(cfg), 0.3)
    rng = np.random.default_rng(3)
    m = synth(cfg, 1)[0]
    coords = np.asarray(m.coords)
    e0 = model.denoise_head(model.forward_batch([m], [Mode.MODE_3D])).data[0]
    assert np.abs(e0).max() > 1e-3
    for _ in range(5):
        rot, t = random_rotation(rng), rng.normal(size=3) * 3
        e = model.denoise_head(model.forward_batch([m], [Mode.MODE_3D], [coords @ rot.T + t])).data[0]
        assert np.abs(e - e0 @ rot.T).max() < 1e-9
    assert not e0[0].any()


def test_denoise_head_zero_output_weights(small_config):
    model = jittered(Model(small_config), 0.3)
    model.params["denoise.w2"].data[:] = 0.0
    m = synth(small_config, 1)[0]
    assert not model.denoise_head(model.forward_batch([m], [Mode.MODE_3D])).data.any()


def test_denoise_head_two_atoms_antiparallel(small_config):
    model = jittered(Model(small_config), 0.3)
    m = Molecule(((0, 0), (1, 0)), coords=[[0.0, 0.0, 0.0], [0.6, 0.8, 0.0]])
    e = model.denoise_head(model.forward_batch([m], [Mode.MODE_3D])).data[0, 1:]
    axis = np.array([0.6, 0.8, 0.0])
    for v in e:
        assert np.linalg.norm(np.cross(v, axis)) < 1e-12
    assert np.dot(e[0], axis) * np.dot(e[1], axis) <= 0


def test_denoise_head_coincident_atoms_are_finite(small_config):
    model = jittered(Model(small_config), 0.3)
    m = Molecule(((0, 0), (1, 0), (2, 0)), coords=[[0, 0, 0], [0, 0, 0], [1.0, 0, 0]])
    e = model.denoise_head(model.forward_batch([m], [Mode.MODE_3D])).data
    assert np.all(np.isfinite(e))


def test_denoise_attention_excludes_pseudo(small_config):
    model = jittered(Model(small_config), 0.3)
    m = synth(small_config, 1)[0]
    a = model.denoise_attention(model.forward_batch([m], [Mode.MODE_3D])).data
    assert not a[0, :, 0].any()
    assert np.allclose(a[0].sum(-1), 1.0)


def test_forward_deterministic(small_config):
    model = Model(small_config, rng=np.random.default_rng(5))
    mols = synth(small_config, 3)
    a = model.forward_batch(mols, [Mode.MODE_2D3D] * 3).scalar.data.tobytes()
    b = model.forward_batch(mols, [Mode.MODE_2D3D] * 3).scalar.data.tobytes()
    assert a == b


def test_dropout_only_with_rng(small_config):
    cfg = ModelConfig(**{**small_config.to_dict(), "dropout_attention": 0.5})
    model = jittered(Model(cfg), 0.3)
    mols = synth(cfg, 2)
    plain = model.forward_batch(mols, [Mode.MODE_2D] * 2).scalar.data
    again = model.forward_batch(mols, [Mode.MODE_2D] * 2).scalar.data
    dropped = model.forward_batch(mols, [Mode.MODE_2D] * 2, rng=np.random.default_rng(0)).scalar.data
    assert np.array_equal(plain, again)
    assert not np.array_equal(plain, dropped)


def test_stage_of_matches_first_reader(small_config):
    model = jittered(Model(small_config), 0.3)
    m = synth(small_config, 1)[0]
    c = model.collate([m], [Mode.MODE_2D3D])
    plan = model.stage_plan(c)
    for name in ("spd_table", "layers.1.wk", "layers.0.w2", "final_ln.gain", "layers.1.ln2.bias"):
        t = model.params[name]
        k = model.stage_of(name)
        state = None
        for step in plan[:k]:
            state = step(state)
        saved = t.data.copy()
        before = state
        t.data = saved + 1.0
        after = None
        for step in plan[:k]:
            after = step(after)
        t.data = saved
        if k:
            assert np.array_equal(after.x.data, before.x.data), name
