"""Static SVG figures of a run (matplotlib, headless backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed element ids and no timestamp, so reruns write identical files
plt.rcParams["svg.hashsalt"] = "multirate"
SVG_METADATA = {"Date": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def _bands(ax, theta_max):
    if theta_max is not None:
        for b in (theta_max, -theta_max):
            ax.axhline(b, color="k", linestyle="--", linewidth=1.0)


def trace_plots(log, outdir, theta_max=None, label="multirate"):
    """``states.svg``, ``inputs.svg`` and ``theta.svg`` for one trace."""
    t, x, xb = log.t, log.x, log.xbar
    names = ("p_x [m]", "v_x [m/s]", "theta [rad]", "omega [rad/s]")
    fig, axes = plt.subplots(4, 1, figsize=(7, 9), sharex=True)
    for i, (ax, name) in enumerate(zip(axes, names)):
        ax.plot(t, x[:, i], label="x")
        ax.plot(t, xb[:, i], label="planner", linestyle="--")
        ax.set_ylabel(name)
    axes[0].legend(loc="best")
    axes[-1].set_xlabel("t [s]")
    _save(fig, f"{outdir}/states.svg")

    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    for ax, y, name in zip(axes, (log.u, log.v, log.u + log.v), ("u [V]", "v [V]", "u + v [V]")):
        ax.plot(t, y)
        ax.set_ylabel(name)
    axes[-1].set_xlabel("t [s]")
    _save(fig, f"{outdir}/inputs.svg")

    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(t, x[:, 2], label=label)
    _bands(ax, theta_max)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("theta [rad]")
    ax.legend(loc="best")
    _save(fig, f"{outdir}/theta.svg")


def overlay_plots(logs, labels, path, theta_max=None):
    """Position and tilt of several traces on shared axes."""
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for lg, lb in zip(logs, labels):
        ax0.plot(lg.t, lg.x[:, 0], label=lb)
        ax1.plot(lg.t, lg.x[:, 2], label=lb)
    _bands(ax1, theta_max)
    ax0.set_ylabel("p_x [m]")
    ax1.set_ylabel("theta [rad]")
    ax1.set_xlabel("t [s]")
    ax0.legend(loc="best")
    _save(fig, path)
