"""Analytic multiply-accumulate accounting over a recorded op trace.

Trace entries are dicts with ``stage``, ``name``, ``kind``, ``sites`` (sites
computed by the sparse path) and ``dense_sites`` (sites a dense head computes),
plus per-kind shape fields. Costs per site:

    conv3x3   9 * f_in * f_out
    mlp       sum of f_in * f_out over layers
    deform    18 * f_in (offsets) + 9 * f_in * f_out + 9 * 4 * f_in (bilinear blends)
    sample    4 * channels (one bilinear blend)
    marker    0 (records the active set size)

Gathered feature elements (conv and deformable taps on the sparse path) are
reported separately as overhead and never enter the MAC totals.
"""

from dataclasses import dataclass

from spsmask.errors import InputError

FLOPS_HEADER = "# spsmask-flops v1"
KINDS = ("conv3x3", "mlp", "deform", "sample", "marker")


def site_macs(entry):
    kind = entry.get("kind")
    if kind == "conv3x3":
        return 9 * entry["f_in"] * entry["f_out"]
    if kind == "mlp":
        return sum(fi * fo for fi, fo in entry["dims"])
    if kind == "deform":
        f_in, f_out = entry["f_in"], entry["f_out"]
        return 18 * f_in + 9 * f_in * f_out + 36 * f_in
    if kind == "sample":
        return 4 * entry["channels"]
    if kind == "marker":
        return 0
    raise InputError(f"unknown op kind {kind!r} in trace entry {entry.get('name')!r}")


def site_gathers(entry):
    kind = entry["kind"]
    if kind == "conv3x3":
        return 9 * entry["f_in"]
    if kind == "deform":
        return 36 * entry["f_in"]
    return 0


@dataclass(frozen=True)
class OpCount:
    stage: int
    name: str
    kind: str
    sparse_macs: int
    dense_macs: int
    gather_elems: int


@dataclass(frozen=True)
class FlopReport:
    ops: tuple
    active: tuple  # (stage, n_active_parents, n_parent_cells)

    @property
    def sparse_macs(self):
        return sum(o.sparse_macs for o in self.ops)

    @property
    def dense_macs(self):
        return sum(o.dense_macs for o in self.ops)

    @property
    def gather_elems(self):
        return sum(o.gather_elems for o in self.ops)

    @property
    def ratio(self):
        d = self.dense_macs
        return self.sparse_macs / d if d else 0.0

    def _subset_ratio(self, pred):
        sp = sum(o.sparse_macs for o in self.ops if pred(o))
        de = sum(o.dense_macs for o in self.ops if pred(o))
        return sp / de if de else 0.0

    @property
    def module_ratio(self):
        """Sparse/dense MACs of the processing modules alone."""
        return self._subset_ratio(lambda o: o.name.startswith("module."))

    @property
    def module_conv_ratio(self):
        return self._subset_ratio(lambda o: o.name.startswith("module.") and o.kind == "conv3x3")

    def stage_totals(self):
        stages = sorted({o.stage for o in self.ops})
        return [
            (s, sum(o.sparse_macs for o in self.ops if o.stage == s),
             sum(o.dense_macs for o in self.ops if o.stage == s))
            for s in stages
        ]

    def active_fractions(self):
        return {s: (a / c if c else 0.0) for s, a, c in self.active}

    def format(self):
        lines = [FLOPS_HEADER, "stage\top\tkind\tsparse_macs\tdense_macs\tgather_elems"]
        for o in self.ops:
            lines.append(f"{o.stage}\t{o.name}\t{o.kind}\t{o.sparse_macs}\t{o.dense_macs}\t{o.gather_elems}")
        lines.append("")
        lines.append("stage\tsparse_macs\tdense_macs\tratio")
        for s, sp, de in self.stage_totals():
            lines.append(f"{s}\t{sp}\t{de}\t{(sp / de if de else 0.0):.6f}")
        lines.append("")
        lines.append("stage\tactive_parents\tparent_cells\tactive_fraction")
        for s, a, c in self.active:
            lines.append(f"{s}\t{a}\t{c}\t{(a / c if c else 0.0):.6f}")
        lines.append("")
        lines.append(f"sparse_macs\t{self.sparse_macs}")
        lines.append(f"dense_macs\t{self.dense_macs}")
        lines.append(f"sparse_gflops\t{2 * self.sparse_macs / 1e9:.6f}")
        lines.append(f"dense_gflops\t{2 * self.dense_macs / 1e9:.6f}")
        lines.append(f"gather_elems\t{self.gather_elems}")
        lines.append(f"ratio\t{self.ratio:.6f}")
        lines.append(f"module_ratio\t{self.module_ratio:.6f}")
        lines.append(f"module_conv_ratio\t{self.module_conv_ratio:.6f}")
        return "\n".join(lines) + "\n"


def count_flops(trace):
    ops, active = [], []
    for e in trace:
        per_site = site_macs(e)
        if e["kind"] == "marker":
            active.append((e["stage"], e["sites"], e["dense_sites"]))
            continue
        ops.append(OpCount(
            stage=e["stage"], name=e["name"], kind=e["kind"],
            sparse_macs=int(e["sites"]) * per_site,
            dense_macs=int(e["dense_sites"]) * per_site,
            gather_elems=int(e["sites"]) * site_gathers(e) if e["stage"] else 0,
        ))
    return FlopReport(tuple(ops), tuple(active))
