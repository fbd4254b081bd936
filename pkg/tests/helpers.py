"""Shared test oracles and the acceptance-criterion registry."""
import functools

from jicgsim.circuit import X


def nand_devices(n):
    """Edges (node_a, node_b, device) of an n-input NAND with duplicated transistors.

    Every logical transistor is two devices in series. The pull-down is one
    series chain, the pull-up has one branch per input.
    """
    edges = []
    for k in range(n):
        top = "out" if k == 0 else f"s{k}"
        bottom = "gnd" if k == n - 1 else f"s{k + 1}"
        edges += [(top, f"n{k}m", ("N", k, "a")), (f"n{k}m", bottom, ("N", k, "b"))]
        edges += [("vdd", f"p{k}m", ("P", k, "a")), (f"p{k}m", "out", ("P", k, "b"))]
    return edges


def conduction_oracle(n, inputs, lit_devices):
    """Output of the NAND by graph search over conducting devices; contention reads 0."""
    def conducts(dev):
        ch, k, _ = dev
        on = inputs[k] == 1 if ch == "N" else inputs[k] == 0
        return on or dev in lit_devices

    adj = {}
    for a, b, dev in nand_devices(n):
        if conducts(dev):
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
    seen, todo = {"out"}, ["out"]
    while todo:
        for nxt in adj.get(todo.pop(), ()):
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    if "gnd" in seen:
        return 0
    return 1 if "vdd" in seen else X


ACCEPTANCE = {}


def criterion(number, title):
    """Record PASS/FAIL of an acceptance test for the end-of-run summary."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                ACCEPTANCE[number] = (title, False, f"{type(exc).__name__}: {exc}".splitlines()[0])
                raise
            ACCEPTANCE[number] = (title, True, detail or "")
        return run
    return wrap
