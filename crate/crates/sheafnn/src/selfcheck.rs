//! Placeholder while lower modules are brought up.
