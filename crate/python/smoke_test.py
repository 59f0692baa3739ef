"""Smoke test for the dcmg_roa extension module.

Build and install next to this script first:

    cargo build --release -p dcmg-roa-python
    cp target/release/libdcmg_roa.so python/dcmg_roa.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, HERE)

import dcmg_roa  # noqa: E402

FIXTURES = os.path.join(HERE, "..", "fixtures")


def close(x, target, rel):
    return abs(x - target) <= rel * abs(target)


def main():
    net = dcmg_roa.Network.load(os.path.join(FIXTURES, "one_bus.json"))
    print(net)
    assert net.n_states == 2 and net.n_sources == 1

    cert, dispatch = dcmg_roa.run_pipeline(net)
    print(cert)
    print(dispatch)
    assert abs(cert.floor_volts[0] - 62.3) <= 0.5
    assert close(dispatch.u_volts[0], 64.8, 0.02)
    assert dispatch.relaxation == "exact"
    assert cert.certifies(dispatch.v_load)

    # certificate round trip and pairing
    again = dcmg_roa.Certificate.from_json(cert.to_json())
    assert again.beta == cert.beta
    assert close(dcmg_roa.synthesize(net, again).u[0], dispatch.u[0], 1e-9)
    try:
        dcmg_roa.synthesize(net.with_box(10.0, 20.0), cert)
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched certificate accepted")

    # the certified setpoint attracts the whole box; the borderline sits below it
    assert dcmg_roa.box_converges(net, dispatch.u)
    border = dcmg_roa.borderline_setpoint(net) * net.voltage_scale
    rd = (dispatch.u_volts[0] - border) / border
    print(f"borderline {border:.3f} V, relative difference {rd:.4f}")
    assert abs(border - 59.4) <= 0.5

    x_e = dispatch.equilibrium
    status, times, states = dcmg_roa.simulate(net, dispatch.u, [x_e[0] + 20.0, x_e[1] - 20.0])
    assert status == "converged", status
    assert math.isclose(states[-1][1], x_e[1], rel_tol=1e-2)

    v = dcmg_roa.power_flow(net, dispatch.u)
    assert math.isclose(v[0], dispatch.v_bus[0], rel_tol=1e-8)

    opf = dcmg_roa.solve_opf(net)
    assert opf.objective <= dispatch.objective + 1e-6

    # errors map onto Python exceptions
    try:
        dcmg_roa.Network.from_json("{")
    except ValueError:
        pass
    else:
        raise AssertionError("corrupt network accepted")
    spec = json.loads(net.to_json())
    spec["buses"][0]["voltage_bounds"] = [1.0, 60.0]
    spec["bounds"]["setpoint"] = [1.0, 60.0]
    capped = dcmg_roa.Network.from_json(json.dumps(spec))
    try:
        dcmg_roa.synthesize(capped, dcmg_roa.certify(capped))
    except dcmg_roa.InfeasibleError as e:
        print(f"infeasible as expected: {e}")
    else:
        raise AssertionError("floor above the voltage cap was accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
