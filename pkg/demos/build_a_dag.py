"""Build attention dags by hand, validate them, and run them.

Walks through the three bundled dags plus a deliberately broken one,
showing what the symbolic shape checker reports and how a legal dag
evaluates against plain numpy.
"""

import numpy as np

from opnas.search_space import (
    AttentionDag,
    BackboneSpec,
    DagNode,
    LayerSpec,
    deserialize,
    eval_dag,
    infer_shapes,
    key_value_mix_attention_dag,
    serialize,
    softplus_key_attention_dag,
    standard_attention_dag,
    validate,
)
from opnas.tensor import Tensor


def describe(tag, dag):
    legal, reason = validate(dag)
    print(f"{tag}: inputs={dag.inputs} nodes={len(dag.nodes)} legal={legal}")
    if legal:
        for node, shape in zip(dag.nodes, infer_shapes(dag)):
            print(f"    {node.op}{node.args} -> {shape}")
    else:
        print(f"    rejected: {reason}")


def main():
    # ------------------------------------------------------------------
    # the standard scaled-dot-product layer, written as a node list
    describe("standard attention", standard_attention_dag())
    describe("softplus-key", softplus_key_attention_dag())
    describe("key-value-mix", key_value_mix_attention_dag())

    # a dag that type-checks nowhere: cosine needs two equal rank-2 shapes
    broken = AttentionDag(
        inputs=("q", "k"),
        nodes=(DagNode("transpose", ("k",)), DagNode("cosine", ("q", 0))),
    )
    describe("broken", broken)

    # ------------------------------------------------------------------
    # evaluating a dag is just running its nodes over named tensors
    rng = np.random.default_rng(0)
    n, d_h = 6, 4
    env = {name: Tensor(rng.normal(size=(n, d_h))) for name in ("q", "k", "v")}
    out = eval_dag(standard_attention_dag(), env)

    q, k, v = (env[name].data for name in ("q", "k", "v"))
    scores = q / np.sqrt(d_h) @ k.T
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    print(f"\nengine vs numpy, max deviation: {np.abs(out.data - weights @ v).max():.2e}")

    # ------------------------------------------------------------------
    # backbones round-trip through the on-disk format
    spec = BackboneSpec((
        LayerSpec.conv(15),
        LayerSpec.attention(key_value_mix_attention_dag()),
    ))
    text = serialize(spec)
    print(f"serialized 2-layer backbone is {len(text)} bytes; "
          f"round-trips: {deserialize(text) == spec}")


if __name__ == "__main__":
    main()
