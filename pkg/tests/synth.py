"""Random PLOT tables with float32-exact reps, independent of any model."""

import numpy as np

from hmi import plot


def f32(a):
    return a.astype(np.float32).astype(np.float64)


def random_tree(seed, vocab=6, n=3, d=4, root_keys=30, branch_keys=15, branches=1):
    g = np.random.default_rng(seed)
    entries = {}
    for t in range(vocab):
        entries[(t,)] = plot.PlotEntry(f32(g.standard_normal((1, d))), int(g.integers(1, 9)))
    for _ in range(root_keys):
        k = int(g.integers(2, n + 1))
        key = tuple(int(x) for x in g.integers(0, vocab, k))
        entries[key] = plot.PlotEntry(f32(g.standard_normal((k, d))), int(g.integers(1, 9)))
    tree = plot.VersionTree(plot.PlotTable(plot.ROOT_VERSION, n, d, entries))
    for b in range(1, branches + 1):
        bent = {}
        for _ in range(branch_keys):
            key = tuple(int(x) for x in g.integers(0, vocab, n))
            bent[key] = plot.PlotEntry(f32(g.standard_normal((n, d))), int(g.integers(1, 9)))
        tree.add_branch(plot.PlotTable(b, n, d, bent, parent_id=0, domain_label=f"dom{b}", alpha_percent=50.0))
    return tree


def tenant_store(model, tenants, seed=0):
    from hmi.adapters import AdapterStore, seeded_adapter_set
    from hmi.transformer import random_head
    cfg = model.config
    store, heads = AdapterStore(), {}
    g = np.random.default_rng(seed)
    for t in range(tenants):
        tid = f"t{t}"
        store.register(seeded_adapter_set(tid, cfg.higher_layers, cfg.hidden_size, cfg.adapter_bottleneck, seed + t))
        heads[tid] = random_head(g, tid, "cls_classify", cfg.hidden_size, 3)
    return store, heads


def random_batches(seed, tenants, heads, vocab, n_batches, max_batch, max_len=10, version=0):
    from hmi.scheduler import InferBatch, InferRequest
    g = np.random.default_rng(seed)
    batches, rid = [], 0
    for b in range(n_batches):
        reqs = []
        for _ in range(int(g.integers(1, max_batch + 1))):
            tid = f"t{int(g.integers(0, tenants))}"
            toks = [int(x) for x in g.integers(0, vocab, int(g.integers(1, max_len + 1)))]
            reqs.append(InferRequest(rid, tid, tid, version, tid, toks, head=heads[tid]))
            rid += 1
        batches.append(InferBatch(b, reqs))
    return batches
