import pytest

from kgquery.graph import KnowledgeGraph

EXAMPLE_TRIPLES = [
    ("A", "r", "B"),
    ("A", "r", "C"),
    ("B", "s", "D"),
    ("C", "s", "D"),
    ("C", "s", "E"),
    ("E", "r", "D"),
]


@pytest.fixture
def example_kg():
    """The six-triple graph over entities A..E and relations r, s."""
    return KnowledgeGraph.from_named_triples(list("ABCDE"), ["r", "s"], EXAMPLE_TRIPLES)


@pytest.fixture
def example_files(tmp_path):
    triples = tmp_path / "kg.triples.tsv"
    ents = tmp_path / "kg.entities.txt"
    rels = tmp_path / "kg.relations.txt"
    triples.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in EXAMPLE_TRIPLES))
    ents.write_text("# entities\nA\nB\nC\nD\nE\n")
    rels.write_text("r\ns\n")
    return triples, ents, rels


# -- acceptance reporting ----------------------------------------------------------
# Tests marked ``criterion(n)`` attach a detail string via ``record_property("detail", ...)``;
# the terminal summary prints one PASS/FAIL line per criterion.

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    if report.when != "call" and report.skipped:
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    _CRITERIA[marker.args[0]] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
