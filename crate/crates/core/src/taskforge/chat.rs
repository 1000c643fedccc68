//! Llama-3 style chat rendering.

use super::corpus::InstructionSample;

pub const PAD: &str = "<|finetune_right_pad_id|>";
pub const BEGIN: &str = "<|begin_of_text|>";
pub const HEADER_START: &str = "<|start_header_id|>";
pub const HEADER_END: &str = "<|end_header_id|>";
pub const EOT: &str = "<|eot_id|>";
pub const GRAPH: &str = "<graph_token>";
pub const SYSTEM: &str = "system";
pub const USER: &str = "user";
pub const ASSISTANT: &str = "assistant";
pub const SYSTEM_TEXT: &str = " A chat between a curious user and an artificial intelligence assistant. The assistant gives helpful, detailed, and polite answers to the user's questions.";
pub const SELFIES_LEAD: &str = " The molecule SELFIES sequence is: ";

/// Which inputs appear in the user turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    /// Emit the graph placeholder when the sample carries a graph.
    pub graph: bool,
    /// Append the molecule strings to the instruction.
    pub selfies: bool,
}

impl RenderOptions {
    pub const FULL: RenderOptions = RenderOptions { graph: true, selfies: true };
    pub const TEXT_ONLY: RenderOptions = RenderOptions { graph: false, selfies: true };
    pub const GRAPH_ONLY: RenderOptions = RenderOptions { graph: true, selfies: false };
}

/// User-turn text: instruction, then the molecules joined with '.'.
pub fn user_text(sample: &InstructionSample, opts: RenderOptions) -> String {
    let mut s = sample.instruction.clone();
    if opts.selfies && !sample.molecules.is_empty() {
        s.push_str(SELFIES_LEAD);
        s.push_str(&sample.molecules.join("."));
    }
    s
}

pub fn has_graph(sample: &InstructionSample, opts: RenderOptions) -> bool {
    opts.graph && sample.graph.is_some()
}

/// Everything up to and including the assistant header.
pub fn render_prompt(sample: &InstructionSample, opts: RenderOptions) -> String {
    let mut s = String::new();
    s.push_str(BEGIN);
    s.push_str(HEADER_START);
    s.push_str(SYSTEM);
    s.push_str(HEADER_END);
    s.push_str("\n\n");
    s.push_str(SYSTEM_TEXT);
    s.push_str(EOT);
    s.push_str(HEADER_START);
    s.push_str(USER);
    s.push_str(HEADER_END);
    s.push_str("\n\n");
    if has_graph(sample, opts) {
        s.push_str(GRAPH);
        s.push('\n');
    }
    s.push_str(&user_text(sample, opts));
    s.push_str(EOT);
    s.push_str(HEADER_START);
    s.push_str(ASSISTANT);
    s.push_str(HEADER_END);
    s.push_str("\n\n");
    s
}

/// The assistant turn: response followed by end-of-turn.
pub fn render_completion(sample: &InstructionSample) -> String {
    format!("{}{EOT}", sample.response)
}

pub fn render_chat(sample: &InstructionSample, opts: RenderOptions) -> String {
    render_prompt(sample, opts) + &render_completion(sample)
}
