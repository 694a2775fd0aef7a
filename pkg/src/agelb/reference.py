"""Published benchmark configurations: seven policies with their mean waiting
times for finite N (simulation) and in the large-system limit."""

from dataclasses import dataclass

from . import phasetype
from .policies import parse_policy


@dataclass(frozen=True)
class BenchmarkRow:
    label: str
    policy: str
    d: int
    lam: float
    delta: float
    scv: float
    f: float
    k: int
    ew_limit: float
    ew_finite: tuple  # (N, mean wait) pairs

    def ph(self):
        return phasetype.fit_merlang(self.scv, self.f, self.k)

    def make_policy(self, ph=None):
        return parse_policy(self.policy, ph if ph is not None else self.ph())

    def finite(self, N):
        return dict(self.ew_finite)[N]

    @property
    def threshold(self):
        _, _, arg = self.policy.partition(":")
        return float(arg) if arg else None


_N = (10, 50, 100, 500, 1000, 2000)

TABLE1 = (
    BenchmarkRow("SQ(3)-RTB", "sq-rtb", 3, 0.7, 0.01, 10, 1 / 2, 2, 0.9172,
                 tuple(zip(_N, (1.6204, 1.0409, 0.9829, 0.9278, 0.9217, 0.9182)))),
    BenchmarkRow("SQ(5)-RE(2)", "sq-re:2", 5, 0.8, 0.1, 10, 1 / 10, 1, 1.5649,
                 tuple(zip(_N, (3.3083, 1.8969, 1.7229, 1.6017, 1.5810, 1.5656)))),
    BenchmarkRow("SQ(10)-RTB-RE(2)", "sq-rtb-re:2", 10, 0.8, 0.1, 15, 1 / 3, 5, 0.1366,
                 tuple(zip(_N, (2.1140, 0.3635, 0.2374, 0.1565, 0.1452, 0.1384)))),
    BenchmarkRow("LAS(2)", "las", 2, 0.6, 0.5, 20, 1 / 4, 1, 3.7156,
                 tuple(zip(_N, (4.8688, 3.9673, 3.850, 3.7789, 3.7743, 3.7551)))),
    BenchmarkRow("LAS(7)-QTB", "las-qtb", 7, 0.9, 0.01, 20, 2 / 3, 5, 0.6462,
                 tuple(zip(_N, (7.6238, 1.4891, 0.9909, 0.6986, 0.6824, 0.6523)))),
    BenchmarkRow("RE(6,2)", "re:2", 6, 0.8, 0.1, 10, 1 / 4, 1, 1.3846,
                 tuple(zip(_N, (3.4524, 1.7820, 1.5838, 1.4292, 1.4087, 1.3934)))),
    BenchmarkRow("LEW(8)", "lew", 8, 0.9, 0.5, 15, 1 / 3, 1, 0.8266,
                 tuple(zip(_N, (6.0683, 1.5494, 1.1312, 0.8801, 0.8484, 0.8275)))),
)


def row(label):
    for r in TABLE1:
        if r.label == label:
            return r
    raise KeyError(label)
