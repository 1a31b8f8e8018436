"""Count adjacent grid steps where a larger rank scores a worse proxy.

Kernel error under nested HOSVD can only shrink with rank; the output-space
proxy need not, because the error it measures depends on the layer inputs.
"""
import argparse

from rankcompress import build_arch, build_tables
from rankcompress.decompose import ProposalGrid


def violations(table, tol=1e-12):
    out = []
    for lid, row in zip(table.layers, table.rows()):
        for lo, hi in zip(row, row[1:]):
            if hi.delta_acc < lo.delta_acc - tol:
                out.append((lid, lo, hi))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--archs", nargs="+", default=["testnet_small", "stresnet_pico"])
    ap.add_argument("--grids", nargs="+", default=["8:8", "4:4"], help="start:step pairs")
    args = ap.parse_args()
    for arch in args.archs:
        m = build_arch(arch, num_classes=10)
        for g in args.grids:
            start, step = (int(v) for v in g.split(":"))
            table = build_tables(m, ProposalGrid(start, (step,)))
            bad = violations(table)
            steps = sum(max(0, len(r) - 1) for r in table.rows())
            print(f"{arch:<16} grid {g:<6} {len(bad):>4}/{steps} steps get worse")
            for lid, lo, hi in bad[:5]:
                print(f"    {lid:<20} ({lo.proposal.r1},{lo.proposal.r2}) {lo.nmse:.4f} -> "
                      f"({hi.proposal.r1},{hi.proposal.r2}) {hi.nmse:.4f}")


if __name__ == "__main__":
    main()
