#!/usr/bin/env python3
"""Recompute, from first principles, every hand-derived number frozen in the tests.

Deliberately independent of the package: plain Python floats and explicit
arithmetic only, no imports from src/. Run it and diff against the constants
asserted in tests/ whenever a frozen value looks suspicious.
"""

import math


def lif_update(u, z_prev, current, beta, theta):
    new_u = beta * u + current - z_prev * theta
    spike = 1.0 if new_u >= theta else 0.0
    return new_u, spike


def main():
    print("# leaky integrate-and-fire single-neuron updates")
    u, z = lif_update(0.0, 0.0, 1.0, beta=0.9, theta=1.0)
    print(f"step(u=0, z=0, in=+1, beta=0.9, theta=1)      -> u'={u!r} z'={z!r}")
    u2, z2 = lif_update(u, z, 0.0, beta=0.9, theta=1.0)
    print(f"next(in=0)                                    -> u''={u2!r} z''={z2!r}")
    u3, z3 = lif_update(0.5, 0.0, -1.0, beta=0.8, theta=1.0)
    print(f"step(u=0.5, z=0, in=-1, beta=0.8, theta=1)    -> u'={u3!r} z'={z3!r}")

    print("\n# single neuron, beta=0, theta=1, weight +1, inputs [1,0,1]")
    u = z = 0.0
    spikes = []
    for x in (1.0, 0.0, 1.0):
        u, z = lif_update(u, z, x, beta=0.0, theta=1.0)
        spikes.append(z)
    print(f"spike train                                   -> {spikes}")

    print("\n# fast-sigmoid surrogate 1/(1+k|theta0-u|)^2")
    print(f"u=0, theta0=10, k=1                           -> {1.0 / (1.0 + 1.0 * 10.0) ** 2!r}")
    print(f"paper approximation 1/theta^2                 -> {1.0 / 10.0 ** 2!r}")

    print("\n# decay from membrane time constant: 1 - dt/tau")
    print(f"tau=10, dt=1                                  -> {1.0 - 1.0 / 10.0!r}")
    print(f"tau=1000, dt=1                                -> {1.0 - 1.0 / 1000.0!r}")

    print("\n# threshold warm-up: recurrence vs closed form")
    theta0, theta_inf, alpha = 5.0, 50.0, 5e-3
    one_step = theta0 + alpha * (theta_inf - theta0)
    closed = theta_inf - (1.0 - alpha) ** 1 * (theta_inf - theta0)
    print(f"one update from 5 toward 50, alpha=5e-3       -> {one_step!r}")
    print(f"closed form at gamma=1                        -> {closed!r}")
    gamma_conv = math.log(0.001 * theta_inf / (theta_inf - theta0)) / math.log(1 - alpha)
    print(f"gamma for |theta-50| <= 0.1% of 50            -> {gamma_conv:.1f}")

    print("\n# spike-clipping bound: violated iff dtheta >= u_next - theta")
    print(f"dtheta=0.2, u_next=1.5, theta=1.0 headroom    -> {1.5 - 1.0!r} (0.2 <  0.5: ok)")
    print(f"dtheta=0.6, same headroom                     ->        (0.6 >= 0.5: violated)")

    print("\n# warm-up rate constraints")
    lhs = (1 - 0.1) * 1.0 + 0.1 * 2.0
    print(f"(1-a)*theta + a*theta_inf, a=0.1,th=1,thinf=2 -> {lhs!r} (< 1.5: c1 true)")
    print(f"theta_inf=2 vs z.w=1.5                        -> c2 false")

    print("\n# membrane trace mse: sum_t (y_t - u_t)^2")
    print(f"y=[1,0], u=[0,0]                              -> {(1 - 0) ** 2 + (0 - 0) ** 2!r}")

    print("\n# spike-count mse, targets 0.8T correct / 0.2T wrong")
    t = 10
    loss = (0.8 * t - 2) ** 2 + (0.2 * t - 8) ** 2
    print(f"T=10, counts (2,8), correct=0                 -> {loss!r}")
    loss_silent = 80.0 ** 2 + 9 * 20.0 ** 2
    print(f"T=100, 10 classes, all silent                 -> {loss_silent!r}")

    print("\n# sgd with momentum 0.9, eta=1e-3, g=1 twice from rest")
    v = 0.0
    dp = 0.0
    for _ in range(2):
        v = 0.9 * v + 1.0
        dp -= 1e-3 * v
    print(f"total parameter change                        -> {dp!r}")

    print("\n# adam first step, constant gradient g")
    g, eta, eps = 3.0, 1e-3, 1e-8
    m_hat, v_hat = g, g * g  # bias correction at t=1 cancels (1-beta) factors
    step1 = -eta * m_hat / (math.sqrt(v_hat) + eps)
    print(f"g=3: delta p                                  -> {step1!r} (~ -eta*sign(g))")

    print("\n# cosine learning rate 0.5*eta0*(1+cos(pi*(g mod P)/P))")
    eta0, period = 2e-3, 100
    print(f"gamma=0                                       -> {0.5 * eta0 * (1 + math.cos(0.0))!r}")
    print(f"gamma=period/2                                -> {0.5 * eta0 * (1 + math.cos(math.pi / 2))!r}")

    print("\n# init bound sqrt(1/fan_in)")
    print(f"fan_in=4                                      -> {math.sqrt(1.0 / 4.0)!r}")
    print(f"fan_in=100                                    -> {math.sqrt(1.0 / 100.0)!r}")

    print("\n# dead-neuron reduction (dead_b - dead_a)/dead_b")
    print(f"dead_a=0.2, dead_b=0.9                        -> {(0.9 - 0.2) / 0.9!r}")

    print("\n# membrane carry with detached reset and no spikes: du2/du1 = beta")
    print("grad of u2 wrt a constant-injected u1 offset   -> beta exactly")

    print("\n# triangular target peak")
    print(f"t=t_spike=75, theta_ref=50, 10% above         -> {1.1 * 50.0!r}")


if __name__ == "__main__":
    main()
