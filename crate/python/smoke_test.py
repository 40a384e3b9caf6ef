"""Smoke test for the `seal` extension module.

Build and install first:  pip install --no-build-isolation -e crates/python
"""

import math

import seal


def main():
    mask = [[0, 0, 0, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]]
    inside = [[0.0, 0.0, 0.0, 0.0], [0.0, 0.25, 0.25, 0.0], [0.0, 0.25, 0.25, 0.0], [0.0] * 4]
    uniform = [[1.0] * 4 for _ in range(4)]

    supp, bind, total = seal.layer_spatial_loss(inside, mask)
    assert supp == 0.0, supp
    assert abs(bind - (1 - 1 / 7)) < 1e-6, bind
    assert math.isclose(total, supp + bind)
    assert seal.leakage_ratio(inside, mask) == 0.0
    assert abs(seal.leakage_ratio([[x / 16 for x in r] for r in uniform], mask) - 0.75) < 1e-6

    assert seal.select_semantic_layers(16) == list(range(4, 12))
    assert seal.select_semantic_layers(6) == [1, 2, 3, 4]

    a = seal.ConceptEmbedding([1.0, 2.0, 3.0])
    b = seal.ConceptEmbedding([3.0, 2.0, 1.0])
    assert seal.merge([a, b]).values == [2.0, 2.0, 2.0]
    assert seal.merge([a, a]).values == a.values

    domain, fields = seal.parse_tag_line("animation, bear character, happy, waving, close-up, flat color, park")
    assert domain == "animation" and fields[0] == "bear character"
    edited = seal.attribute_edit(seal.serialize_tag(fields), "background", "beach")
    assert seal.parse_tag_line(edited)[1] == fields[:5] + ["beach"]

    cfg = seal.AdaptationConfig(steps=4, k=2)
    assert (cfg.k, cfg.steps, cfg.control().k, cfg.control().lambda_spatial) == (2, 4, 1, 0.0)
    try:
        seal.AdaptationConfig(k=0)
    except ValueError:
        pass
    else:
        raise AssertionError("k=0 accepted")

    scenes = seal.generate_corpus(1, 8)
    bb, losses = seal.Backbone.build(0).pretrain(scenes, steps=10, seed=1)
    assert len(losses) == 10 and all(math.isfinite(x) for x in losses)
    bb = bb.freeze()
    scene = seal.Scene.generate(3, 2)
    result = seal.adapt(bb, scene, cfg)
    assert len(result.auxiliaries) == 2 and len(result.logs) == 2
    assert len(result.logs[0].strip().splitlines()) == 4
    assert len(result.embedding) == len(bb.initial_embedding(scene.tags))
    h, w, rgb = bb.generate(scene.tags, result.embedding, steps=3)
    assert len(rgb) == h * w * 3
    print("smoke test passed")


if __name__ == "__main__":
    main()
