//! Agent side of the system: emulated TEEs, agent runtimes, a relying
//! service, signed inter-agent messages and the built-in scenarios.

pub mod agent;
pub mod host;
pub mod isolation;
pub mod scenario;
pub mod tee;

pub use agent::{
    agent_authenticate, send_signed_message, verify_peer_message, AgentRuntime, AuthSessionResult,
    HarnessError, PeerVerification, RelyingService, SignedAgentMessage, TranscriptStep,
};
pub use host::EphemeralGateway;
pub use isolation::SecretScanner;
pub use scenario::{run_on_ephemeral_gateway, run_scenario, EphemeralRun, ScenarioConfig, ScenarioEnv, ScenarioReport, SCENARIOS};
pub use tee::EmulatedTee;
