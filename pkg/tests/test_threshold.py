import hashlib
import random

import pytest
from ecdsa import SECP256k1, SigningKey, VerifyingKey
from ecdsa.ellipticcurve import Point as OraclePoint
from hypothesis import given, settings
from hypothesis import strategies as st

from lngate.ec import G, Q_ORDER, Point
from lngate.threshold_ecdsa import (
    ChildIndex,
    CommitmentPointClient,
    CommitmentPointServer,
    DlogProof,
    EcdsaSignature,
    InvalidSignature,
    KeygenClient,
    KeygenMsg1,
    KeygenMsg2,
    KeygenMsg3,
    KeygenServer,
    KeyTag,
    ProofRejected,
    ShareOutOfRange,
    SignClient,
    SignMsg1,
    SignMsg2,
    SignMsg3,
    SignMsg4,
    SignServer,
    ThresholdError,
    child_tweak,
    combine_commitment_secret,
    commitment_share,
    derive_child,
    derive_commitment_point,
    keygen,
    normalize_s,
    prove_dlog,
    sign,
    sign_single,
    verify_dlog,
    verify_standard,
)

q = Q_ORDER
BITS = 1024


def oracle_verify(Q: Point, m: bytes, sig: EcdsaSignature) -> bool:
    """Textbook verification by the ecdsa package, independent of our curve code."""
    vk = VerifyingKey.from_public_point(OraclePoint(SECP256k1.curve, Q.x, Q.y), curve=SECP256k1)
    try:
        return vk.verify_digest((sig.r, sig.s), hashlib.sha256(m).digest(), sigdecode=lambda s, order: s)
    except Exception:
        return False


def oracle_sign(x: int, k: int, m: bytes) -> EcdsaSignature:
    sk = SigningKey.from_secret_exponent(x, curve=SECP256k1)
    r, s = sk.sign_digest(hashlib.sha256(m).digest(), k=k, sigencode=lambda r, s, order: (r, s))
    return EcdsaSignature(r, normalize_s(s))


# ----------------------------------------------------------------- keygen


def test_identity_shares_give_generator():
    sv, cv = keygen(1, 2, paillier_bits=BITS, x1=1, x2=1, allow_test_size=True)
    assert sv.Q == cv.Q == G


def test_multiplicative_sharing():
    sv, cv = keygen(1, 2, paillier_bits=BITS, x1=2, x2=3, allow_test_size=True)
    assert sv.Q == cv.Q == 6 * G


def test_seeded_keygen_matches_oracle(joint_keys):
    sv, cv = joint_keys
    x1, x2 = sv.share.x, cv.share.x
    expected = SECP256k1.generator * (x1 * x2 % q)
    assert (sv.Q.x, sv.Q.y) == (expected.x(), expected.y())
    assert sv.Q == cv.Q == x2 * sv.share.Q_i == x1 * cv.share.Q_i
    assert sv.paillier_sk.decrypt(cv.c_key) == x1
    assert cv.paillier_sk is None


def test_keygen_is_deterministic_for_seeds(joint_keys):
    sv, cv = keygen(42, 43, paillier_bits=BITS, allow_test_size=True)
    assert sv.Q == joint_keys[0].Q


def test_share_out_of_range():
    with pytest.raises(ShareOutOfRange):
        keygen(1, 2, paillier_bits=BITS, x1=0, allow_test_size=True)
    with pytest.raises(ShareOutOfRange):
        keygen(1, 2, paillier_bits=BITS, x2=q, allow_test_size=True)


def test_keygen_messages_roundtrip_and_reject_bad_proof():
    rng = random.Random(5)
    server = KeygenServer(rng, BITS, allow_test_size=True)
    client = KeygenClient(random.Random(6), allow_test_size=True)
    m1 = KeygenMsg1.from_bytes(server.round1().to_bytes())
    m2 = KeygenMsg2.from_bytes(client.round2(m1).to_bytes())
    m3 = KeygenMsg3.from_bytes(server.round3(m2).to_bytes())
    assert client.finish(m3).Q == server.result().Q

    bad = KeygenMsg2(m2.Q2 + G, m2.proof)
    with pytest.raises(ProofRejected):
        KeygenServer(random.Random(5), BITS, allow_test_size=True).round3(bad)


def test_client_rejects_small_modulus(monkeypatch):
    server = KeygenServer(random.Random(5), BITS, allow_test_size=True)
    client = KeygenClient(random.Random(6))
    monkeypatch.delenv("LNGATE_TEST_PAILLIER", raising=False)
    m2 = client.round2(server.round1())
    with pytest.raises(ProofRejected):
        client.finish(server.round3(m2))


def test_client_rejects_changed_decommitment():
    server = KeygenServer(random.Random(5), BITS, allow_test_size=True)
    client = KeygenClient(random.Random(6), allow_test_size=True)
    m3 = server.round3(client.round2(server.round1()))
    other = KeygenServer(random.Random(9), BITS, allow_test_size=True)
    forged = KeygenMsg3(other.Q1, other.proof, m3.blind, m3.paillier_n, m3.c_key)
    with pytest.raises(ProofRejected):
        client.finish(forged)


# ------------------------------------------------------------ dlog proofs


def test_dlog_proof_examples():
    Q1 = 5 * G
    proof = prove_dlog(5, Q1, random.Random(1))
    assert verify_dlog(Q1, proof)
    assert not verify_dlog(Q1, DlogProof(proof.A, proof.e, (proof.z + 1) % q))
    assert not verify_dlog(Q1 + G, proof)
    assert not verify_dlog(Q1, proof, context=b"other")


def test_dlog_proof_tampering_always_rejected():
    rng = random.Random(3)
    for _ in range(100):
        x = rng.randrange(1, q)
        Qi = x * G
        proof = prove_dlog(x, Qi, rng)
        raw = bytearray(proof.to_bytes())
        pos = rng.randrange(len(raw))
        raw[pos] ^= 1 << rng.randrange(8)
        try:
            tampered = DlogProof.from_bytes(bytes(raw))
        except ValueError:
            continue
        assert not verify_dlog(Qi, tampered)


# ---------------------------------------------------------------- signing


def test_unit_nonces_give_generator_x(joint_keys):
    sig = sign(b"m", *joint_keys, k1=1, k2=1)
    assert sig.r == G.x % q


def test_signature_verifies_under_both_verifiers(joint_keys):
    sv, cv = joint_keys
    for i in range(5):
        m = f"message {i}".encode()
        sig = sign(m, sv, cv, ephemeral_seeds=(i, i + 100))
        assert sig.is_low_s
        assert verify_standard(sv.Q, m, sig)
        assert oracle_verify(sv.Q, m, sig)


def test_signature_equals_single_party_signer(joint_keys):
    sv, cv = joint_keys
    x = sv.share.x * cv.share.x % q
    rng = random.Random(11)
    for _ in range(10):
        k1, k2 = rng.randrange(1, q), rng.randrange(1, q)
        m = rng.randbytes(40)
        assert sign(m, sv, cv, k1=k1, k2=k2) == oracle_sign(x, k1 * k2 % q, m)
        assert sign_single(x, m, k1 * k2 % q) == oracle_sign(x, k1 * k2 % q, m)


def test_low_s_normalization():
    assert normalize_s(q - 1) == 1
    assert normalize_s(5) == 5
    assert normalize_s((q - 1) // 2) == (q - 1) // 2
    assert normalize_s((q + 1) // 2) == (q - 1) // 2


def test_verify_standard_rejections(joint_keys):
    sv, cv = joint_keys
    sig = sign(b"pay", sv, cv, ephemeral_seeds=(1, 2))
    assert verify_standard(sv.Q, b"pay", sig)
    assert not verify_standard(sv.Q, b"pay", EcdsaSignature(sig.r ^ 1, sig.s))
    assert not verify_standard(sv.Q + G, b"pay", sig)
    assert not verify_standard(sv.Q, b"pax", sig)
    assert not verify_standard(sv.Q, b"pay", EcdsaSignature(0, sig.s))
    assert not verify_standard(sv.Q, b"pay", EcdsaSignature(sig.r, q))


def test_sign_messages_roundtrip(joint_keys):
    sv, cv = joint_keys
    server = SignServer(sv, b"wire", random.Random(1))
    client = SignClient(cv, random.Random(2))
    m2 = SignMsg2.from_bytes(client.round2(SignMsg1.from_bytes(server.round1().to_bytes())).to_bytes())
    m4 = SignMsg4.from_bytes(client.round4(SignMsg3.from_bytes(server.round3(m2).to_bytes())).to_bytes())
    assert verify_standard(sv.Q, b"wire", server.finish(m4))


def test_malicious_client_detected(joint_keys):
    sv, cv = joint_keys
    server = SignServer(sv, b"m", random.Random(1))
    client = SignClient(cv, random.Random(2))
    m3 = server.round3(client.round2(server.round1()))
    m4 = client.round4(m3)
    garbage = SignMsg4(sv.paillier_pk.add(m4.c3, sv.paillier_pk.encrypt(1, random.Random(0))))
    with pytest.raises(InvalidSignature):
        server.finish(garbage)


def test_tampered_ephemeral_proof_rejected(joint_keys):
    sv, cv = joint_keys
    server = SignServer(sv, b"m", random.Random(1))
    client = SignClient(cv, random.Random(2))
    m2 = client.round2(server.round1())
    with pytest.raises(ProofRejected):
        server.round3(SignMsg2(m2.R2 + G, m2.proof))
    m3 = server.round3(m2)
    with pytest.raises(ProofRejected):
        client.round4(SignMsg3(m3.R1 + G, m3.proof, m3.blind))


def test_views_cannot_sign_alone(joint_keys):
    sv, cv = joint_keys
    with pytest.raises(ThresholdError):
        SignServer(cv, b"m")
    with pytest.raises(ThresholdError):
        SignClient(sv)


# ------------------------------------------------------- child derivation


def test_derive_child_then_sign(joint_keys):
    sv, cv = joint_keys
    idx = ChildIndex(7)
    csv, ccv = derive_child(sv, idx), derive_child(cv, idx)
    assert csv.Q == ccv.Q == child_tweak(sv.Q, idx) * sv.Q
    sig = sign(b"child", csv, ccv, ephemeral_seeds=(3, 4))
    assert verify_standard(csv.Q, b"child", sig)
    assert oracle_verify(csv.Q, b"child", sig)


def test_child_tweak_homomorphism(joint_keys):
    sv, cv = joint_keys
    rng = random.Random(12)
    seen = set()
    for _ in range(100):
        idx = ChildIndex(rng.randrange(2**32), rng.choice(list(KeyTag)))
        child = derive_child(cv, idx)
        assert child.Q == child_tweak(cv.Q, idx) * cv.Q
        assert child.Q == derive_child(sv, idx).Q
        seen.add(child.Q)
    assert len(seen) == 100
    assert derive_child(sv, ChildIndex(0)).Q != derive_child(sv, ChildIndex(1)).Q


def test_child_index_bounds():
    with pytest.raises(ValueError):
        ChildIndex(2**32)
    with pytest.raises(ValueError):
        ChildIndex(-1)


# ------------------------------------------------------ commitment points


def test_commitment_point_is_product_of_shares(joint_keys):
    sv, cv = joint_keys
    for n in range(4):
        point = derive_commitment_point(sv, cv, n, rng=n)
        secret = combine_commitment_secret(commitment_share(sv, n), commitment_share(cv, n))
        assert point == secret * G
    assert derive_commitment_point(sv, cv, 0, 1) != derive_commitment_point(sv, cv, 1, 1)


def test_commitment_point_release_and_consistency(joint_keys):
    sv, cv = joint_keys
    server = CommitmentPointServer(sv, 5, random.Random(1))
    msg2 = CommitmentPointClient(cv, random.Random(2)).round2(5, server.round1(), release=3)
    assert msg2.released_index == 3 and msg2.released_share == commitment_share(cv, 3)
    assert server.finish(msg2) == msg2.point

    lying = type(msg2)(msg2.B, msg2.proof, msg2.point + G)
    with pytest.raises(ProofRejected):
        server.finish(lying)


@settings(max_examples=25, deadline=None)
@given(st.binary(min_size=0, max_size=64), st.integers(1, q - 1), st.integers(1, q - 1))
def test_property_joint_equals_single_signer(joint_keys, m, k1, k2):
    sv, cv = joint_keys
    x = sv.share.x * cv.share.x % q
    assert sign(m, sv, cv, k1=k1, k2=k2) == oracle_sign(x, k1 * k2 % q, m)
