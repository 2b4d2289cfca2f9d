import time

import pytest

from flowline.authz import (
    ALL_AUTHENTICATED,
    PUBLIC,
    AuthService,
    ConsentRequired,
    CycleDetected,
    FlowRoles,
    RunRoles,
    UnknownScope,
    is_scope_url,
)
from flowline.store import Store

PREFIX = "http://flowline.test/scopes"


@pytest.fixture
def auth(tmp_path):
    return AuthService(Store(str(tmp_path / "auth.db")), PREFIX, token_lifetime=3600)


def test_scope_url_grammar(auth):
    _, urls = auth.register_resource("flow:x", ["run", "update", "delete"])
    assert [u.rsplit("/", 1)[1] for u in urls] == ["run", "update", "delete"]
    for url in urls:
        assert is_scope_url(url)
    assert not is_scope_url("http://x/notauuid/run")
    assert not is_scope_url("ftp://x/5a8d8568-1b4c-4a3e-9b3e-1234567890ab/run")


def test_duplicate_ops_rejected(auth):
    with pytest.raises(Exception):
        auth.register_resource("svc", ["run", "run"])


def test_service_style_registration(auth):
    _, urls = auth.register_resource("service:flows", ["publish", "manage"])
    assert urls[0].endswith("/publish") and urls[1].endswith("/manage")


class TestDependentScopes:
    def test_closure_walks_transitively(self, auth):
        _, [parent] = auth.register_resource("flow:p", ["run"])
        _, [child] = auth.register_resource("flow:c", ["run"])
        _, [echo] = auth.register_resource("provider:echo", ["run"])
        auth.link_dependent_scopes(child, [echo])
        auth.link_dependent_scopes(parent, [child])
        assert auth.scope_closure(parent) == {child, echo}

    def test_self_dependency_rejected(self, auth):
        _, [scope] = auth.register_resource("flow:s", ["run"])
        with pytest.raises(CycleDetected):
            auth.link_dependent_scopes(scope, [scope])

    def test_cycle_rejected(self, auth):
        _, [a] = auth.register_resource("a", ["run"])
        _, [b] = auth.register_resource("b", ["run"])
        auth.link_dependent_scopes(a, [b])
        with pytest.raises(CycleDetected):
            auth.link_dependent_scopes(b, [a])

    def test_closure_deterministic(self, auth):
        _, [a] = auth.register_resource("a", ["run"])
        deps = []
        for name in "bcd":
            _, [s] = auth.register_resource(name, ["run"])
            deps.append(s)
        auth.link_dependent_scopes(a, deps)
        assert auth.scope_closure(a) == auth.scope_closure(a) == set(deps)


class TestTokens:
    def test_issue_requires_consent_for_deps(self, auth):
        uid = auth.create_principal("u")
        _, [flow_scope] = auth.register_resource("flow:f", ["run"])
        _, [echo] = auth.register_resource("provider:echo", ["run"])
        auth.link_dependent_scopes(flow_scope, [echo])
        with pytest.raises(ConsentRequired) as err:
            auth.issue_token(uid, [flow_scope])
        assert err.value.required == sorted({echo})
        token = auth.issue_token(uid, [flow_scope], consent="all")
        assert auth.introspect(token["access_token"])["active"]

    def test_unknown_scope_rejected(self, auth):
        uid = auth.create_principal("u")
        with pytest.raises(UnknownScope):
            auth.issue_token(uid, [f"{PREFIX}/5a8d8568-1b4c-4a3e-9b3e-1234567890ab/run"])

    def test_expired_token_inactive(self, auth):
        uid = auth.create_principal("u")
        token = auth.issue_token(uid, [], lifetime=0.05)
        time.sleep(0.1)
        assert auth.introspect(token["access_token"]) == {"active": False}

    def test_introspection_carries_identity_and_scopes(self, auth):
        uid = auth.create_principal("u")
        _, [scope] = auth.register_resource("r", ["run"])
        token = auth.issue_token(uid, [scope], consent="all")
        intro = auth.introspect(token["access_token"])
        assert intro["sub"] == uid and intro["scopes"] == [scope]

    def test_dependent_token_downstream(self, auth):
        """A flow-run token yields a usable dependent token for a dependent
        provider scope; downstream introspection accepts it."""
        uid = auth.create_principal("u")
        _, [flow_scope] = auth.register_resource("flow:f", ["run"])
        _, [echo] = auth.register_resource("provider:echo", ["run"])
        auth.link_dependent_scopes(flow_scope, [echo])
        parent = auth.issue_token(uid, [flow_scope], consent="all")
        child = auth.dependent_token(parent["access_token"], echo)
        intro = auth.introspect(child["access_token"])
        assert intro["active"] and echo in intro["scopes"] and intro["sub"] == uid

    def test_dependent_token_refused_outside_closure(self, auth):
        uid = auth.create_principal("u")
        _, [flow_scope] = auth.register_resource("flow:f", ["run"])
        _, [other] = auth.register_resource("unrelated", ["run"])
        parent = auth.issue_token(uid, [flow_scope], consent="all")
        with pytest.raises(ConsentRequired):
            auth.dependent_token(parent["access_token"], other)

    def test_refresh(self, auth):
        uid = auth.create_principal("u")
        token = auth.issue_token(uid, [], lifetime=0.05)
        time.sleep(0.1)
        fresh = auth.refresh_token(token["refresh_token"])
        assert auth.introspect(fresh["access_token"])["active"]
        assert not auth.introspect(token["access_token"])["active"]

    def test_token_opacity(self, auth):
        """Decisions depend only on introspection output."""
        roles = FlowRoles(owner="owner-id", runnable_by=("u1",))
        synthetic = {"active": True, "sub": "u1", "scopes": [], "consented": [], "exp": 0}
        assert auth.authorize_introspected(synthetic, None, roles, "runnable").allow


class TestGroups:
    def test_membership_cycle_rejected(self, auth):
        g1 = auth.create_principal("g1", kind="group")
        g2 = auth.create_principal("g2", kind="group")
        auth.add_member(g1, g2)  # g2 in g1
        with pytest.raises(CycleDetected):
            auth.add_member(g2, g1)

    def test_group_substitution(self, auth):
        """Authorization through a group equals direct membership."""
        uid = auth.create_principal("member")
        direct = auth.create_principal("direct")
        group = auth.create_principal("team", kind="group")
        auth.add_member(group, uid)
        roles = FlowRoles(owner="someone", runnable_by=(group, direct))
        for principal in (uid, direct):
            intro = {"active": True, "sub": principal, "scopes": []}
            assert auth.authorize_introspected(intro, None, roles, "runnable").allow

    def test_nested_groups(self, auth):
        uid = auth.create_principal("u")
        inner = auth.create_principal("inner", kind="group")
        outer = auth.create_principal("outer", kind="group")
        auth.add_member(inner, uid)
        auth.add_member(outer, inner)
        assert outer in auth.expand(uid)


class TestAuthorize:
    @pytest.fixture
    def world(self, auth):
        ids = {name: auth.create_principal(name) for name in
               ("owner", "admin", "runner", "viewer", "stranger", "monitor", "manager", "creator")}
        flow_roles = FlowRoles(owner=ids["owner"], administered_by=(ids["admin"],),
                               runnable_by=(ids["runner"],), visible_to=(ids["viewer"],))
        run_roles = RunRoles(creator=ids["creator"], manage_by=(ids["manager"],),
                             monitor_by=(ids["monitor"],))
        return auth, ids, flow_roles, run_roles

    def intro(self, pid):
        return {"active": True, "sub": pid, "scopes": []}

    def test_cumulative_flow_matrix(self, world):
        auth, ids, flow_roles, _ = world
        expected = {
            "owner":    {"visible": True, "runnable": True, "admin": True, "owner": True},
            "admin":    {"visible": True, "runnable": True, "admin": True, "owner": False},
            "runner":   {"visible": True, "runnable": True, "admin": False, "owner": False},
            "viewer":   {"visible": True, "runnable": False, "admin": False, "owner": False},
            "stranger": {"visible": False, "runnable": False, "admin": False, "owner": False},
        }
        for who, verdicts in expected.items():
            for relation, allow in verdicts.items():
                got = auth.authorize_introspected(self.intro(ids[who]), None, flow_roles, relation)
                assert got.allow is allow, (who, relation)

    def test_run_matrix(self, world):
        auth, ids, _, run_roles = world
        expected = {
            "creator": {"monitor": True, "manage": True},
            "manager": {"monitor": True, "manage": True},
            "monitor": {"monitor": True, "manage": False},
            "stranger": {"monitor": False, "manage": False},
        }
        for who, verdicts in expected.items():
            for relation, allow in verdicts.items():
                got = auth.authorize_introspected(self.intro(ids[who]), None, run_roles, relation)
                assert got.allow is allow, (who, relation)

    def test_public_visible_without_token(self, auth):
        roles = FlowRoles(owner="o", visible_to=(PUBLIC,))
        assert auth.authorize_introspected({"active": False}, None, roles, "visible").allow
        assert not auth.authorize_introspected({"active": False}, None, roles, "runnable").allow

    def test_all_authenticated_runnable(self, auth):
        uid = auth.create_principal("anyone")
        roles = FlowRoles(owner="o", runnable_by=(ALL_AUTHENTICATED,))
        assert auth.authorize_introspected(self.intro(uid), None, roles, "runnable").allow
        assert not auth.authorize_introspected({"active": False}, None, roles, "runnable").allow

    def test_scope_required(self, auth):
        uid = auth.create_principal("u")
        roles = FlowRoles(owner=uid)
        intro = {"active": True, "sub": uid, "scopes": ["http://x/scope"]}
        assert auth.authorize_introspected(intro, "http://x/scope", roles, "runnable").allow
        assert not auth.authorize_introspected(intro, "http://x/other", roles, "runnable").allow
