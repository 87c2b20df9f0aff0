"""Campaign features are expensive, so each configuration is extracted once per session."""
import pytest

from aoalb.aoa_features import WindowPlan, extract_campaign
from aoalb.channel_sim import default_campaign

CAMPAIGN_SEED = 42


@pytest.fixture(scope="session")
def campaign_tracks():
    return default_campaign(CAMPAIGN_SEED)


@pytest.fixture(scope="session")
def features_w2000(campaign_tracks):
    """{"MUSIC": Dataset, "ESPRIT": Dataset} at W=2000, all ten tracks."""
    return extract_campaign(campaign_tracks, WindowPlan(2000), ("MUSIC", "ESPRIT"))


@pytest.fixture(scope="session")
def features_w500(campaign_tracks):
    return extract_campaign(campaign_tracks, WindowPlan(500), ("MUSIC",))["MUSIC"]


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance criterion and print it."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
