"""Versioned prompt templates used by the relevance filter, the scenario
generator, and the judge harness.

Template text is frozen: rendered prompts are compared byte-for-byte against
golden files in the test suite, so any edit here must bump the version tag
and regenerate the goldens.
"""

from __future__ import annotations

import re

PROMPTS_VERSION = "1"

# Decides whether one CVE plausibly enables false data injection for one
# (device, technology factor) pair. The model must answer with a bare
# YES or NO token.
CVE_RELEVANCE_TEMPLATE = """\
You are a security engineer. Decide if the vulnerability with (CVE No.: {cve} and Description: {description}) below could plausibly enable an attacker to INJECT, MODIFY, or SPOOF data used by an ML component in a medical device ({device}) and cause incorrect ML predictions. First, check if the technology factor {factor} is affected by this vulnerability {cve}. Proceed with the next steps only if the medical device ({device}) uses the {factor}. If it doesn't, answer with NO. Otherwise, follow the next steps.
Answer strictly with:
YES  - if the {cve} plausibly allows data tampering/insertion/spoofing.
NO   - if it is only info disclosure/enum, UI redirect, DoS-only, or cannot reasonably lead to data being altered/inserted for the system.
Return ONLY the single token YES or NO.

Medical device: {device}
Technological factor: {factor}
CVE: {cve}
CNA: {cna}
CVE Description: {description}"""

# Produces the five-stage attack plan for one relevant (technology, CVE)
# pair. Stage names and their order are fixed; exploit code is forbidden.
ATTACK_STEPS_TEMPLATE = """\
Act as a security engineer who has the task of identifying the steps that an adversary follows to cause a security breach in an ML-enabled medical system. An ML-enabled system comprises an ML-enabled component collecting inputs from multiple peripheral devices and sending the predicted output to another peripheral device. A security breach is an event where a malicious attacker compromises the overall system's confidentiality, integrity, or availability. You are given a system description, a data flow, an ML attack, a targeted input peripheral component, a targeted technology, and a known vulnerability in the input component. Give a list of steps to show how an adversary can exploit the vulnerability to mislead the ML-enabled component and how that affects the action of the output device on the patient.
Constraints:
- Do NOT include exploit code, commands, payloads
- Keep each step concise and high-level.
- You MUST use exactly these 5 step names, in this order:
  1) Reconnaissance
  2) Gaining access
  3) Privilege escalation
  4) Attack execution
  5) Impact
System Description: {system_description}
Data flow: {data_flow}
ML attack: {ml_attack}
Targeted technology: {targeted_technology}
Known vulnerability (CVE):
- CVE: {cve_id}
- CNA: {cna}
- Description: {cve_description}"""

# Grades a generated attack plan step by step. The judge must reply with the
# JSON object shown at the end and nothing else; reasons are forbidden.
JUDGE_TEMPLATE = """\
Act as a security expert reviewing a five-step attack plan that was written for an ML-enabled medical system.

You are given the system context, a known vulnerability (CVE), and the attack plan. Decide for each step whether it is correct.

A step is correct only if all of the following hold:
- It is consistent with the system context and the CVE description, with no contradictions.
- It is plausible and relevant to injecting, tampering with, or spoofing data that reaches the ML component.
- It does not invent system components or capabilities that the context does not imply.
- Its content fits its named phase.

Rules:
- Do NOT give reasons or explanations.
- Do NOT output exploit code, commands, payloads, or procedural detail.
- Judge exactly these 5 steps, in this order:
  1) Reconnaissance
  2) Gaining access
  3) Privilege escalation
  4) Attack execution
  5) Impact

System context:
{context}

Attack plan to judge:
{attack_plan}

Reply with JSON only, exactly in this shape:
{"per_step": [{"name": "Reconnaissance", "correct": true}, {"name": "Gaining access", "correct": true}, {"name": "Privilege escalation", "correct": true}, {"name": "Attack execution", "correct": true}, {"name": "Impact", "correct": true}], "overall_correct": true}"""

_SLOT_RE = re.compile(r"\{([a-z_]+)\}")


def render(template: str, values: dict[str, str]) -> str:
    """Substitute every ``{slot}`` in one pass.

    Single-pass substitution means slot-like text inside values (or inside
    the template's literal JSON braces) is never re-expanded. Unknown slots
    raise KeyError so template/values drift fails loudly.
    """
    def _sub(match: re.Match[str]) -> str:
        return values[match.group(1)]

    return _SLOT_RE.sub(_sub, template)
