from __future__ import annotations

import dataclasses
import json

import pytest

from umx.model_zoo import (
    ALPHABET,
    BENCHMARKS,
    CONT,
    NON_SEQUENTIAL_BENCHMARKS,
    SEQUENTIAL_BENCHMARKS,
    InvalidConfig,
    InvalidModel,
    LayerSpec,
    LayerType,
    ModelFormatError,
    ModelSpec,
    RandomModelConfig,
    UnknownBenchmark,
    build_benchmark,
    check_model,
    collapse,
    dumps_model,
    generate_random_model,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
    validate_model,
)


def conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


@pytest.mark.parametrize("name", BENCHMARKS)
def test_catalog_models_are_valid(name):
    spec = build_benchmark(name)
    assert validate_model(spec) == []
    assert spec.name == name


def test_groups_partition_catalog():
    assert set(SEQUENTIAL_BENCHMARKS) | set(NON_SEQUENTIAL_BENCHMARKS) == set(BENCHMARKS)
    assert not set(SEQUENTIAL_BENCHMARKS) & set(NON_SEQUENTIAL_BENCHMARKS)
    assert len(BENCHMARKS) == 8


def test_unknown_benchmark():
    with pytest.raises(UnknownBenchmark):
        build_benchmark("lenet")


def test_alphabet_is_seven_types_plus_cont():
    assert len(ALPHABET) == 8
    assert ALPHABET[-1] == CONT
    assert set(ALPHABET[:-1]) == {t.value for t in LayerType}


def test_vgg16_is_sequential():
    spec = build_benchmark("vgg16")
    assert LayerType.SHORTCUT not in spec.layer_types()
    assert spec.layer_types().count(LayerType.CONV) == 13
    assert spec.layer_types().count(LayerType.FC) == 3


def test_reference_first_block():
    types = build_benchmark("reference").layer_types()
    assert types[:4] == [LayerType.CONV, LayerType.BN, LayerType.ACT, LayerType.POOL_MAX]


def test_resnet18_shortcuts_point_to_block_entry():
    spec = build_benchmark("resnet18")
    shortcuts = [l for l in spec.layers if l.type is LayerType.SHORTCUT]
    assert len(shortcuts) == 8
    for sc in shortcuts:
        src = sc.shortcut_from
        assert src is not None and src < sc.index
        # the block entry is the layer feeding the block's first conv
        assert spec.layers[src + 1].type is LayerType.CONV
        convs = [l for l in spec.layers[src + 1 : sc.index] if l.type is LayerType.CONV]
        assert len(convs) == 2


@pytest.mark.parametrize("name,n_conv", [("resnet50", 49), ("resnet101", 100)])
def test_bottleneck_resnet_conv_counts(name, n_conv):
    # stem conv + 3 convs per bottleneck block (3-4-6-3 and 3-4-23-3)
    spec = build_benchmark(name)
    assert spec.layer_types().count(LayerType.CONV) == n_conv
    assert spec.layer_types().count(LayerType.FC) == 1


def test_conv_arithmetic_of_catalog():
    for name in BENCHMARKS:
        for l in build_benchmark(name).layers:
            if l.type is LayerType.CONV:
                ci, kh, kw, co = l.filter_dims
                assert l.ifm_dims[0] == ci and l.ofm_dims[0] == co
                assert l.ofm_dims[1] == conv_out(l.ifm_dims[1], kh, l.stride, l.pad)
                assert l.ofm_dims[2] == conv_out(l.ifm_dims[2], kw, l.stride, l.pad)


def test_alexnet_first_conv_dims():
    first = build_benchmark("alexnet").layers[0]
    assert first.filter_dims == (3, 11, 11, 96)
    assert first.ofm_dims == (96, conv_out(227, 11, 4, 0), conv_out(227, 11, 4, 0)) == (96, 55, 55)


def _break_chain(spec: ModelSpec, index: int) -> ModelSpec:
    layers = list(spec.layers)
    l = layers[index]
    c, h, w = l.ifm_dims
    layers[index] = dataclasses.replace(l, ifm_dims=(c + 1, h, w))
    return ModelSpec(spec.name, tuple(layers))


def test_validate_reports_dim_mismatch_by_layer():
    spec = _break_chain(build_benchmark("reference"), 3)
    report = validate_model(spec)
    assert report and 3 in {v.layer for v in report}
    with pytest.raises(InvalidModel):
        check_model(spec)


def test_validate_reports_forward_shortcut():
    spec = build_benchmark("resnet18")
    idx = next(l.index for l in spec.layers if l.type is LayerType.SHORTCUT)
    layers = list(spec.layers)
    layers[idx] = dataclasses.replace(layers[idx], shortcut_from=idx + 1)
    report = validate_model(ModelSpec(spec.name, tuple(layers)))
    assert idx in {v.layer for v in report}


def test_validate_rejects_missing_filter():
    spec = build_benchmark("alexnet")
    layers = list(spec.layers)
    layers[0] = dataclasses.replace(layers[0], filter_dims=None)
    assert 0 in {v.layer for v in validate_model(ModelSpec(spec.name, tuple(layers)))}


def test_random_model_determinism():
    cfg = RandomModelConfig()
    assert dumps_model(generate_random_model(cfg, 7)) == dumps_model(generate_random_model(cfg, 7))
    assert dumps_model(generate_random_model(cfg, 7)) != dumps_model(generate_random_model(cfg, 8))


def test_random_model_without_shortcuts():
    cfg = RandomModelConfig(shortcut_probability=0.0)
    for seed in range(100):
        assert LayerType.SHORTCUT not in generate_random_model(cfg, seed).layer_types()


def test_fixed_length_over_1000_seeds():
    cfg = RandomModelConfig(min_layers=10, max_layers=10)
    for seed in range(1000):
        assert len(generate_random_model(cfg, seed).layers) == 10


def test_random_models_respect_length_bounds_and_validate():
    cfg = RandomModelConfig()
    lengths = []
    for seed in range(200):
        spec = generate_random_model(cfg, seed)
        assert validate_model(spec) == []
        lengths.append(len(spec.layers))
    assert min(lengths) >= cfg.min_layers and max(lengths) <= cfg.max_layers


def test_random_corpus_covers_every_layer_type():
    seen = set()
    for seed in range(200):
        seen.update(generate_random_model(RandomModelConfig(), seed).layer_types())
    assert seen == set(LayerType)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"min_layers": 20, "max_layers": 10},
        {"min_layers": 0},
        {"shortcut_probability": 1.5},
        {"dim_ranges": {"channels": (64, 8), "spatial": (56, 224), "kernel": (1, 7), "fc": (10, 100)}},
    ],
)
def test_invalid_generator_config(kwargs):
    with pytest.raises(InvalidConfig):
        generate_random_model(RandomModelConfig(**kwargs), 0)


def test_json_round_trip(tmp_path):
    for name in ("resnet18", "alexnet"):
        spec = build_benchmark(name)
        path = tmp_path / f"{name}.json"
        save_model(spec, path)
        assert load_model(path) == spec
    spec = generate_random_model(RandomModelConfig(), 3)
    assert model_from_dict(json.loads(dumps_model(spec))) == spec


def test_json_rejects_unknown_fields():
    d = model_to_dict(build_benchmark("reference"))
    d["layers"][0]["activation"] = "relu"
    with pytest.raises(ModelFormatError):
        model_from_dict(d)
    d = model_to_dict(build_benchmark("reference"))
    d["owner"] = "x"
    with pytest.raises(ModelFormatError):
        model_from_dict(d)


def test_json_rejects_bad_layer_type():
    d = model_to_dict(build_benchmark("reference"))
    d["layers"][0]["type"] = "LSTM"
    with pytest.raises(ModelFormatError):
        model_from_dict(d)


def test_collapse_drops_cont_and_keeps_repeats():
    assert collapse(["CONV", CONT, CONT, "CONV", CONT, CONT]) == [LayerType.CONV, LayerType.CONV]
    assert collapse([]) == []


def test_layer_spec_has_filter():
    l = LayerSpec(0, LayerType.CONV, (3, 8, 8), (4, 8, 8), (3, 3, 3, 4), 1, 1)
    assert l.has_filter
    assert not LayerSpec(1, LayerType.ACT, (4, 8, 8), (4, 8, 8)).has_filter
