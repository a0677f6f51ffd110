//! Prompt templates for the generation client. Each instruction holds one
//! bracketed placeholder that [`AugmentationTemplate::render`] replaces.

pub const TEMPLATE_VERSION: &str = "augment-templates/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentationTemplate {
    pub name: &'static str,
    pub system_role: &'static str,
    pub instruction: &'static str,
    pub placeholder: &'static str,
    /// Labels the client output must carry, in order.
    pub output_labels: &'static [&'static str],
}

impl AugmentationTemplate {
    /// Returns `(system_role, instruction)` with the placeholder filled.
    pub fn render(&self, value: &str) -> (String, String) {
        (
            self.system_role.to_string(),
            self.instruction.replacen(self.placeholder, value, 1),
        )
    }

    /// Label of the line carrying the substituted value, e.g. `Question:`.
    pub fn slot_label(&self) -> &'static str {
        let line = self
            .instruction
            .lines()
            .find(|l| l.contains(self.placeholder))
            .expect("template has a placeholder line");
        &line[..line.find(": ").expect("slot line is labelled") + 1]
    }
}

pub const PARAPHRASE: AugmentationTemplate = AugmentationTemplate {
    name: "paraphrase",
    system_role: "You are an expert linguist specializing in semantic equivalence. Your task is to generate paraphrases that preserve the exact meaning of the original question while altering its syntactic structure and word choice.",
    instruction: r#"Given the original question below, generate three distinct paraphrased versions. Ensure that each paraphrase:
1. Uses completely different sentence structure and vocabulary where possible.
2. Maintains the precise intent and scope of the original question.
3. Does not add, remove, or alter any factual constraints or entities mentioned.

Original Question: "[INSERT_ORIGINAL_QUESTION_HERE]"

Output Format:
Paraphrase 1: [Your first paraphrase here]
Paraphrase 2: [Your second paraphrase here]
Paraphrase 3: [Your third paraphrase here]

Example:
Original Question: "What is the capital city of France?"
Paraphrase 1: "Which city serves as the capital of France?"
Paraphrase 2: "Can you name the French capital?"
Paraphrase 3: "France's government is headquartered in which metropolis?""#,
    placeholder: "[INSERT_ORIGINAL_QUESTION_HERE]",
    output_labels: &["Paraphrase 1:", "Paraphrase 2:", "Paraphrase 3:"],
};

pub const PERTURB: AugmentationTemplate = AugmentationTemplate {
    name: "perturb",
    system_role: "You are a mischievous AI designed to generate plausible-sounding but factually incorrect answers. Your goal is to create a single hallucinated response that is subtly wrong, making it difficult for a casual reader to detect the error.",
    instruction: r#"Based on the correct answer provided below, generate one hallucinated answer. The hallucinated answer must:
1. Be factually incorrect, but sound highly plausible and coherent.
2. Contain only one key factual error (e.g., wrong date, wrong location, wrong person, wrong causal relationship).
3. Maintain the same level of detail and writing style as the correct answer.
4. Avoid obvious absurdities or contradictions.

Correct Answer: "[INSERT_CORRECT_ANSWER_HERE]"

Output Format:
Hallucinated Answer: [Your hallucinated answer here]

Example:
Correct Answer: "Steve Jobs was born in San Francisco, California, in 1955."
Hallucinated Answer: "Steve Jobs was born in Los Angeles, California, in 1955.""#,
    placeholder: "[INSERT_CORRECT_ANSWER_HERE]",
    output_labels: &["Hallucinated Answer:"],
};

pub const EXTERNAL: AugmentationTemplate = AugmentationTemplate {
    name: "external",
    system_role: "You are a dual-role AI. First, you are a factual expert who provides accurate information. Second, you are a deceptive agent who generates a corresponding plausible falsehood.",
    instruction: r#"For the question provided below, you must generate two responses:
1. A correct and factual answer.
2. A hallucinated answer that is factually incorrect but sounds reasonable.

Question: "[INSERT_COMMONSENSEQA_QUESTION_HERE]"

Output Format:
Correct Answer: [Your accurate, factual answer here]
Hallucinated Answer: [Your plausible-sounding but factually incorrect answer here]

Example:
Question: "What do people use to cut paper?"
Correct Answer: "People typically use scissors to cut paper."
Hallucinated Answer: "People typically use a knife to cut paper, as it provides a cleaner edge.""#,
    placeholder: "[INSERT_COMMONSENSEQA_QUESTION_HERE]",
    output_labels: &["Correct Answer:", "Hallucinated Answer:"],
};

pub const ALL: [AugmentationTemplate; 3] = [PARAPHRASE, PERTURB, EXTERNAL];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_labels() {
        assert_eq!(PARAPHRASE.slot_label(), "Original Question:");
        assert_eq!(PERTURB.slot_label(), "Correct Answer:");
        assert_eq!(EXTERNAL.slot_label(), "Question:");
    }

    #[test]
    fn render_fills_only_the_slot() {
        let (_, text) = PERTURB.render("X");
        assert!(text.contains("Correct Answer: \"X\""));
        assert!(!text.contains(PERTURB.placeholder));
        assert!(text.contains("Steve Jobs was born in San Francisco"));
    }
}
