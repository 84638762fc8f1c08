"""Regenerate the shipped fixtures. Output is deterministic; rerunning must
leave the tree unchanged (``git diff --exit-code fixtures``)."""

import json
from pathlib import Path

from vnode.hetero import DeviceModel, linear_profiles
from vnode.sched import CATALOG, Job, dump_trace, poisson_trace

HERE = Path(__file__).resolve().parent


def dump(rel: str, doc) -> None:
    path = HERE / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def toy(devices, steps=30, **extra):
    doc = {"workload": {"widths": [4, 16, 4], "activation": "tanh", "loss": "mse"},
           "global_batch": 64, "virtual_nodes": 16, "devices": devices, "steps": steps,
           "lr": 0.05, "seed": 0}
    doc.update(extra)
    return doc


def main():
    # Fig. 1: the same 16 virtual nodes on 16 and on 4 devices, and a live 16 -> 4 resize
    dump("fig1/train_16.json", toy(16))
    dump("fig1/train_4.json", toy(4))
    dump("fig1/train_resize.json", toy(16, resize_schedule=[{"step": 10, "devices": 4}]))
    dump("train_1dev.json", toy(1, virtual_nodes=8))
    dump("train_4dev.json", toy(4, virtual_nodes=8))
    dump("train_vanilla.json", toy(1, virtual_nodes=1))
    dump("train_capacity.json", toy([{"device_id": "small0", "device_type": "T4",
                                      "memory_capacity": 2}], virtual_nodes=8))
    dump("train_resize_8_4_8.json", toy(8, virtual_nodes=8, resize_schedule=[
        {"step": 10, "devices": 4}, {"step": 20, "devices": 8}]))

    # linear cost model, P100 four times slower than V100 in every term
    v100 = DeviceModel("V100", 0.0, 2.0 ** -12, 0.0)
    models = [v100, v100.scaled(4.0, "P100")]
    for t, curve in linear_profiles(models, 256).items():
        dump(f"hetero/profile_{t}.json", curve.to_dict())
    profiles = ["profile_P100.json", "profile_V100.json"]

    def pool(v, p, cap):
        return {"P100": {"count": p, "memory_capacity": cap},
                "V100": {"count": v, "memory_capacity": cap}}

    # Fig. 5: 2 + 2 devices, B = 8192; 48 examples fit in memory at once
    dump("hetero/fig5.json", {"profiles": profiles, "pool": pool(2, 2, 48), "global_batch": 8192})
    # Table 5 groups at ImageNet scale
    dump("hetero/h1.json", {"profiles": profiles, "pool": pool(2, 2, 256), "global_batch": 8192})
    dump("hetero/h2.json", {"profiles": profiles, "pool": pool(2, 4, 256), "global_batch": 8192})
    dump("hetero/h3.json", {"profiles": profiles, "pool": pool(2, 8, 256), "global_batch": 8192})
    dump("hetero/v100_only.json", {"profiles": profiles,
                                   "pool": {"V100": {"count": 4, "memory_capacity": 256}},
                                   "global_batch": 8192})
    dump("hetero/infeasible.json", {"profiles": profiles, "pool": pool(1, 1, 16),
                                    "global_batch": 8192})
    dump("profile.json", {"workload": {"widths": [4, 16, 4], "activation": "relu"},
                          "device_models": [m.to_dict() for m in models], "max_batch": 64,
                          "steps": 20, "execute": True, "seed": 0})

    # the 6:2 uneven split of one 8-example batch
    dump("shard_6_2.json", {"workload": {"widths": [4, 16, 4], "activation": "tanh", "loss": "mse"},
                            "seed": 3, "shares": [6, 2], "dataset_size": 8})

    # 3-job trace: two jobs running, a high-priority job arrives last
    three = [Job("job0", 1, 4, CATALOG["bert-like"], 4000, 0.0),
             Job("job1", 5, 2, CATALOG["resnet-like"], 3000, 300.0),
             Job("job2", 10, 4, CATALOG["transformer-like"], 3000, 600.0)]
    (HERE / "sched").mkdir(exist_ok=True)
    (HERE / "sched/trace_3job.json").write_text(dump_trace(three))
    v100s = lambda n: {"V100": {"count": n, "memory_capacity": 64}}
    dump("sched/3job.json", {"trace": "trace_3job.json", "policy": "wfs", "cluster": v100s(4),
                             "seed": 0})
    (HERE / "sched/trace_20job.json").write_text(dump_trace(poisson_trace(0)))
    dump("sched/20job.json", {"trace": "trace_20job.json", "policy": "wfs",
                              "cluster": v100s(16), "seed": 0})

    het_cluster = {"K80": {"count": 16, "memory_capacity": 64},
                   "P100": {"count": 8, "memory_capacity": 64},
                   "V100": {"count": 4, "memory_capacity": 64}}
    het = [Job("job0", 1, 16, CATALOG["resnet-like"], 20000, 0.0),
           Job("job1", 5, 8, CATALOG["transformer-like"], 15000, 60.0),
           Job("job2", 10, 4, CATALOG["lstm-like"], 30000, 120.0)]
    (HERE / "sched/trace_het.json").write_text(dump_trace(het))
    dump("sched/het.json", {"trace": "trace_het.json", "policy": "het-rounds",
                            "cluster": het_cluster, "round_seconds": 360.0, "seed": 0})
    sat = poisson_trace(3, num_jobs=30, mean_interarrival_s=20.0, demands=(8, 16),
                        minutes=(60.0, 120.0))
    (HERE / "sched/trace_saturating.json").write_text(dump_trace(sat))
    dump("sched/saturating.json", {"trace": "trace_saturating.json", "policy": "het-rounds",
                                   "cluster": het_cluster, "round_seconds": 360.0, "seed": 0})
    (HERE / "sched/trace_empty.json").write_text("[]\n")
    dump("sched/empty.json", {"trace": "trace_empty.json", "policy": "wfs", "cluster": v100s(4)})


if __name__ == "__main__":
    main()
