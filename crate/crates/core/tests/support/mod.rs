pub mod lti_oracle;
