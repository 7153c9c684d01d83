"""
Tests for client-side verification: readouts, service answers, chain answers,
elapsed time and alibis.
"""

from dataclasses import replace

import pytest

from crypto import hash_bytes
from reader import Reader, falsify, observe, tamper
from rpc import NodeUnreachable
from service import provision_n, tamper_readout
from verifier import (
    Alibi,
    ElapsedTime,
    Finding,
    Outcome,
    audit_evidence_service,
    audit_service_answer,
    check_alibi,
    check_elapsed_time,
    validate_term,
    verify_readout,
)


def unreachable(mocker, pipeline, *node_ids, method="query_certificate"):
    for node_id in node_ids:
        mocker.patch.object(pipeline.network.node(node_id), method, side_effect=NodeUnreachable(f"{node_id} down"))


@pytest.mark.unit
class TestChainView:
    def test_tolerance(self, pipeline):
        assert pipeline.view().tolerance == 45

    def test_quorum_is_the_first_nodes(self, pipeline):
        view = pipeline.view(quorum_size=2)
        assert [node.node_id for node in view.quorum] == ["node-0", "node-1"]

    def test_dissenters_are_remembered(self, observed, mocker):
        pipeline, _, readout, _ = observed
        mocker.patch.object(pipeline.network.node("node-2"), "root_at", return_value=hash_bytes(b"bogus"))
        view = pipeline.view()
        assert verify_readout(readout, view, 40).authentic
        assert view.dissenters == {"node-2"}


@pytest.mark.unit
class TestVerifyReadout:
    def test_authentic(self, observed):
        pipeline, _, readout, _ = observed
        verdict = verify_readout(readout, pipeline.view(), 40)
        assert verdict.outcome is Outcome.AUTHENTIC
        assert verdict.bct == 30
        assert verdict.reasons == ()
        assert verdict.notes == (Finding.LOCATION_UNVERIFIED,)

    def test_evidence_not_yet_visible(self, observed):
        pipeline, _, readout, _ = observed
        verdict = verify_readout(readout, pipeline.view(), 30)
        assert verdict.outcome is Outcome.SERVICE_FAULT
        assert verdict.reasons == (Finding.NO_EVIDENCE,)

    @pytest.mark.parametrize("field_name", ["data", "t", "loc"])
    def test_tampered_fields(self, observed, field_name):
        pipeline, _, readout, _ = observed
        verdict = verify_readout(tamper_readout(readout, field_name), pipeline.view(), 40)
        assert verdict.outcome is Outcome.SERVICE_FAULT
        assert Finding.EVIDENCE_MISMATCH in verdict.reasons

    def test_false_time(self, pipeline):
        falsify(pipeline.reader, time_offset=7200)
        n = provision_n(pipeline.service, pipeline.tag.id, [pipeline.client])
        readout, _ = pipeline.observe(20, n)
        pipeline.seal(30)
        verdict = verify_readout(readout, pipeline.view(), 40)
        assert verdict.outcome is Outcome.SERVICE_FAULT
        assert verdict.reasons == (Finding.BCT_MISMATCH,)
        assert verdict.bct == 30

    def test_false_location_goes_unnoticed(self, pipeline):
        falsify(pipeline.reader, location=pipeline.world.location("overflow-yard"))
        n = provision_n(pipeline.service, pipeline.tag.id, [pipeline.client])
        readout, _ = pipeline.observe(20, n)
        pipeline.seal(30)
        verdict = verify_readout(readout, pipeline.view(), 40)
        assert verdict.authentic
        assert Finding.LOCATION_UNVERIFIED in verdict.notes

    def test_tampered_reader(self, pipeline):
        tamper(pipeline.reader, 16)
        n = provision_n(pipeline.service, pipeline.tag.id, [pipeline.client])
        readout, _ = pipeline.observe(20, n)
        pipeline.seal(30)
        verdict = verify_readout(readout, pipeline.view(), 40)
        assert verdict.outcome is Outcome.INVALID_TERM
        assert verdict.reasons == (Finding.SIG_FAIL,)

    def test_uncertified_reader(self, pipeline):
        stranger = Reader.manufacture("stranger", 99, owner="carrier-1", location=pipeline.reader.location)
        readout, _ = observe(stranger, pipeline.tag, 20, provision_n(pipeline.service, pipeline.tag.id, []))
        verdict = verify_readout(readout, pipeline.view(), 40)
        assert verdict.outcome is Outcome.INVALID_TERM
        assert verdict.reasons == (Finding.KEY_UNOBTAINABLE,)

    def test_unprovable_evidence(self, observed, mocker):
        pipeline, _, readout, _ = observed
        for node in pipeline.network.nodes.values():
            mocker.patch.object(node, "root_at", return_value=hash_bytes(b"bogus"))
        verdict = verify_readout(readout, pipeline.view(), 40)
        assert verdict.outcome is Outcome.EVIDENCE_FAULT
        assert verdict.reasons == (Finding.POE_FAIL,)

    def test_one_node_down_is_tolerated(self, observed, mocker):
        pipeline, _, readout, _ = observed
        unreachable(mocker, pipeline, "node-1")
        assert verify_readout(readout, pipeline.view(), 40).authentic

    def test_unreachable_majority(self, observed, mocker):
        pipeline, _, readout, _ = observed
        unreachable(mocker, pipeline, "node-0", "node-2")
        verdict = verify_readout(readout, pipeline.view(), 40)
        assert verdict.outcome is Outcome.UNPROVEN
        assert verdict.reasons == (Finding.CHAIN_UNREACHABLE,)


@pytest.mark.unit
class TestAuditServiceAnswer:
    def test_honest_answer(self, observed):
        pipeline, _, readout, _ = observed
        verdict = audit_service_answer(readout.h1, [readout], pipeline.view(), 40)
        assert verdict.authentic
        assert verdict.bct == 30

    def test_hidden_readout(self, observed):
        pipeline, _, readout, _ = observed
        verdict = audit_service_answer(readout.h1, [], pipeline.view(), 40)
        assert verdict.outcome is Outcome.SERVICE_FAULT
        assert verdict.reasons == (Finding.WITHHELD,)

    def test_readout_for_another_key(self, observed):
        pipeline, _, readout, _ = observed
        wrong = replace(readout, n=bytes(len(readout.n)))
        verdict = audit_service_answer(readout.h1, [wrong], pipeline.view(), 40)
        assert verdict.reasons == (Finding.KEY_MISMATCH, Finding.WITHHELD)

    def test_unreachable(self, observed, mocker):
        pipeline, _, readout, _ = observed
        unreachable(mocker, pipeline, "node-0", "node-1", method="query_evidence")
        verdict = audit_service_answer(readout.h1, [readout], pipeline.view(), 40)
        assert verdict.outcome is Outcome.UNPROVEN


@pytest.mark.unit
class TestAuditEvidenceService:
    def test_every_honest_node(self, observed):
        pipeline, _, readout, evidence = observed
        verdicts = audit_evidence_service(readout.h1, [evidence], pipeline.view(), 40)
        assert {node: v.outcome for node, v in verdicts.items()} == {
            "node-0": Outcome.AUTHENTIC,
            "node-1": Outcome.AUTHENTIC,
            "node-2": Outcome.AUTHENTIC,
        }

    def test_withholding_and_unreachable_nodes(self, observed, mocker):
        pipeline, _, readout, evidence = observed
        mocker.patch.object(pipeline.network.node("node-1"), "query_evidence", return_value=[])
        unreachable(mocker, pipeline, "node-2", method="query_evidence")
        verdicts = audit_evidence_service(readout.h1, [evidence], pipeline.view(), 40)
        assert verdicts["node-0"].authentic
        assert verdicts["node-1"].outcome is Outcome.EVIDENCE_FAULT
        assert verdicts["node-1"].reasons == (Finding.WITHHELD,)
        assert verdicts["node-2"].outcome is Outcome.UNPROVEN


@pytest.mark.unit
class TestValidateTerm:
    def test_valid_terms(self, observed):
        pipeline, _, readout, evidence = observed
        view = pipeline.view()
        assert validate_term(readout, view, 40) is None
        assert validate_term(evidence, view, 40) is None
        assert validate_term(pipeline.certificate, view, 40) is None
        for block in pipeline.network.node("node-0").ledger:
            assert validate_term(block, view, 40) is None

    def test_outside_window(self, observed):
        pipeline, _, _, evidence = observed
        assert validate_term(evidence, pipeline.view(), 10**6 + 1) is Finding.CERT_WINDOW

    def test_block_with_bad_root(self, observed):
        pipeline, *_ = observed
        block = pipeline.network.node("node-0").ledger[1]
        assert validate_term(replace(block, merkle_root=hash_bytes(b"x")), pipeline.view(), 40) is Finding.BLOCK_INVALID

    def test_unreachable(self, observed, mocker):
        pipeline, _, readout, _ = observed
        unreachable(mocker, pipeline, "node-0", "node-1", "node-2")
        assert validate_term(readout, pipeline.view(), 40) is Finding.CHAIN_UNREACHABLE


@pytest.mark.unit
class TestTimeClaims:
    def test_elapsed_time_upheld(self, observed):
        pipeline, _, readout, _ = observed
        assert check_elapsed_time(readout, 20, 40, pipeline.view()) is ElapsedTime.UPHELD
        assert check_elapsed_time(pipeline.certificate, 0, 40, pipeline.view()) is ElapsedTime.UPHELD

    def test_elapsed_time_refuted(self, observed):
        pipeline, _, readout, _ = observed
        assert check_elapsed_time(readout, 500, 600, pipeline.view()) is ElapsedTime.REFUTED

    def test_elapsed_time_survives_vendor_expiry(self, observed):
        pipeline, _, readout, _ = observed
        pipeline.pki.expire(pipeline.vendor.key_digest, 100)
        assert check_elapsed_time(readout, 20, 500, pipeline.view()) is ElapsedTime.UPHELD

    def test_elapsed_time_unproven(self, observed, mocker):
        pipeline, _, readout, _ = observed
        unreachable(mocker, pipeline, "node-0", "node-1", method="bct")
        assert check_elapsed_time(readout, 20, 40, pipeline.view()) is ElapsedTime.UNPROVEN

    def test_alibi(self, observed):
        pipeline, _, readout, evidence = observed
        view = pipeline.view()
        assert check_alibi(readout, 20, 40, view) is Alibi.CONSISTENT
        assert check_alibi(evidence, 20, 40, view) is Alibi.CONSISTENT
        assert check_alibi(readout, 7000, 7100, view) is Alibi.FABRICATION_DETECTED

    def test_alibi_for_unsealed_term(self, pipeline):
        n = provision_n(pipeline.service, pipeline.tag.id, [pipeline.client])
        readout, _ = pipeline.observe(20, n)
        assert check_alibi(readout, 20, 40, pipeline.view()) is Alibi.FABRICATION_DETECTED
