import pathlib

import numpy as np
import pytest

from laopf.cases import parse_matpower_case

DATA = pathlib.Path(__file__).resolve().parent.parent / "data"

TOY3_TEXT = """\
function mpc = toy3
mpc.baseMVA = 100;
% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
	1	3	0	0	0	0	1	1	0	0	1	1.1	0.9;
	2	1	150	0	0	0	1	1	0	0	1	1.1	0.9;
	3	1	0	0	0	0	1	1	0	0	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	0	0	1	100	1	300	0;
	3	0	0	0	0	1	100	1	200	0;
];
mpc.branch = [
	1	2	0	0.1	0	0	0	0	0	0	1	-360	360;
	2	3	0	0.1	0	0	0	0	0	0	1	-360	360;
	1	3	0	0.1	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	2	10	0;
	2	0	0	2	20	0;
];
"""


@pytest.fixture(scope="session")
def toy3():
    return parse_matpower_case(TOY3_TEXT)


@pytest.fixture(scope="session")
def case14_text():
    return (DATA / "case14.m").read_text()


@pytest.fixture(scope="session")
def case14(case14_text):
    return parse_matpower_case(case14_text)
